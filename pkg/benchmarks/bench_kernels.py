"""Time the compiled kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes match the default experiment: 2 s clips (132 frames), a 64-component
UBM, batch 32 through the Bi-LSTM and the CNN/ResNet branches. The last
block times one full training step of the default network under each
backend.
"""

import argparse
import timeit

import numpy as np

from devtrace import kernels
from devtrace import _kernels_py as py_impl


def _cases(rng):
    f32 = np.float32
    X = rng.standard_normal((132 * 32, 39))
    means = rng.standard_normal((64, 39))
    prec = rng.uniform(0.5, 2.0, (64, 39))
    consts = rng.standard_normal(64)
    L = rng.standard_normal((132 * 32, 64))
    z = rng.standard_normal((32, 4 * 78)).astype(f32)
    c = rng.standard_normal((32, 78)).astype(f32)
    acts, _, _, tc = py_impl.lstm_gates_forward(z, c)
    img = rng.standard_normal((32, 64, 39, 6)).astype(f32)
    cols = py_impl.im2col_same(img, 5, 5)
    pool_in = rng.standard_normal((32, 64, 39, 16)).astype(f32)
    y, idx = py_impl.maxpool2_forward(pool_in)
    return {
        "gmm_log_joint": lambda k: k.gmm_log_joint(X, means, prec, consts),
        "logsumexp_normalize": lambda k: k.logsumexp_normalize(L.copy()),
        "lstm_gates_forward": lambda k: k.lstm_gates_forward(z, c),
        "lstm_gates_backward": lambda k: k.lstm_gates_backward(acts, c, tc, c, c),
        "im2col_same": lambda k: k.im2col_same(img, 5, 5),
        "col2im_same": lambda k: k.col2im_same(cols, 32, 64, 39, 6, 5, 5),
        "maxpool2_forward": lambda k: k.maxpool2_forward(pool_in),
        "maxpool2_backward": lambda k: k.maxpool2_backward(y, idx, 64, 39),
    }


def _train_step_time(repeat):
    from devtrace.pstnn import PstnnConfig, PstnnModel, deep_shallow_loss
    from devtrace.nn import Adam

    rng = np.random.default_rng(0)
    model = PstnnModel(PstnnConfig())
    opt = Adam(model.params())
    g = rng.standard_normal((32, 2496)).astype(np.float32)
    m = rng.standard_normal((32, 64, 39)).astype(np.float32)
    y = rng.integers(0, 8, 32)

    def step():
        lt, ls, la = model.forward(g, m, "train")
        loss = deep_shallow_loss(lt, ls, la, y, model.cfg.loss_weights)
        model.zero_grad()
        model.backward(loss.d_t, loss.d_s, loss.d_a)
        opt.step()

    step()
    return min(timeit.repeat(step, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, fn in cases.items():
        times = []
        for b in backends:
            kernels.set_backend(b)
            fn(kernels)
            times.append(min(timeit.repeat(lambda: fn(kernels), number=1, repeat=args.repeat)))
        row = f"{name:<22}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
        if len(times) > 1:
            row += f"{times[0] / times[1]:>9.2f}x"
        print(row)

    steps = []
    for b in backends:
        kernels.set_backend(b)
        steps.append(_train_step_time(max(3, args.repeat // 4)))
    row = f"{'train step (dnn+bilstm)':<22}" + "".join(f"{t * 1e3:>10.1f}ms" for t in steps)
    if len(steps) > 1:
        row += f"{steps[0] / steps[1]:>9.2f}x"
    print(row)


if __name__ == "__main__":
    main()
