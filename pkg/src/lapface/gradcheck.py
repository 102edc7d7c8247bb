"""Central-difference verification of tape gradients.

`finite_diff_check` is the independent oracle used throughout the test
suite; the `suite_*` functions bundle checks for the CLI.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ContractError, VerificationError

REL_FLOOR = 1e-8


def finite_diff_check(f, inputs, step=1e-4):
    """Max relative gradient error of scalar `f` per input.

    `f` receives one Tensor per input array and must return a scalar Tensor.
    Central differences (f(x+he)-f(x-he))/2h are compared elementwise against
    the tape gradient; relative error uses max(|analytic|, |numeric|, 1e-8)
    as denominator.
    """
    if not (1e-6 <= step <= 1e-3):
        raise ContractError(f"finite_diff_check: step {step} outside [1e-6, 1e-3]")
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]

    def evaluate(arrs):
        out = f(*[T.Tensor(a) for a in arrs])
        if out.size != 1:
            raise ContractError("finite_diff_check: f must return a scalar")
        return out.data.reshape(())

    base = evaluate(arrays)
    if evaluate(arrays) != base:
        raise VerificationError("finite_diff_check: f is not deterministic")

    tape = T.Tape()
    tracked = [tape.variable(a) for a in arrays]
    grads = T.backward(f(*tracked))
    analytic = [grads.wrt(t) for t in tracked]

    errors = []
    for i, arr in enumerate(arrays):
        err = 0.0
        flat = arr.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = evaluate(arrays)
            flat[j] = orig - step
            lo = evaluate(arrays)
            flat[j] = orig
            numeric = (hi - lo) / (2.0 * step)
            a = analytic[i].reshape(-1)[j]
            denom = max(abs(a), abs(numeric), REL_FLOOR)
            err = max(err, abs(a - numeric) / denom)
        errors.append(err)
    return errors


# ---------------------------------------------------------------------------
# suites (consumed by the CLI and the test suite)


def _rand(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def suite_primitives(trials=20, seed=0):
    """FD-check every primitive on random small shapes, inputs kept away
    from non-smooth points. Returns [(name, max_rel_err)]."""
    rng = np.random.default_rng(seed)
    results = []

    def shapes():
        n = rng.integers(1, 4)
        return tuple(int(rng.integers(1, 5)) for _ in range(n))

    def run(name, make):
        worst = 0.0
        for _ in range(trials):
            f, args = make()
            worst = max(worst, max(finite_diff_check(f, args)))
        results.append((name, worst))

    def away_from(x, points, margin=0.15):
        for p in points:
            x = np.where(np.abs(x - p) < margin, x + 2 * margin, x)
        return x

    def pair(op):
        # same shape for both operands plus a broadcast scalar variant
        shp = shapes()
        return (lambda a, b: op(a, b).sum(), [_rand(rng, *shp), _rand(rng, *shp)])

    run("add", lambda: pair(lambda a, b: a + b))
    run("subtract", lambda: pair(lambda a, b: a - b))
    run("multiply", lambda: pair(lambda a, b: a * b))
    run("divide", lambda: (lambda a, b: (a / b).sum(),
                           [_rand(rng, *(shp := shapes())), rng.uniform(0.5, 1.5, shp)]))
    run("negate", lambda: (lambda a: (-a).sum(), [_rand(rng, *shapes())]))
    run("absolute", lambda: (lambda a: T.absolute(a).sum(),
                             [away_from(_rand(rng, *shapes()), [0.0])]))
    run("exp", lambda: (lambda a: T.exp(a).sum(), [_rand(rng, *shapes())]))
    run("log", lambda: (lambda a: T.log(a).sum(), [rng.uniform(0.3, 2.0, shapes())]))
    run("sqrt", lambda: (lambda a: T.sqrt(a).sum(), [rng.uniform(0.3, 2.0, shapes())]))
    run("tanh", lambda: (lambda a: T.tanh(a).sum(), [_rand(rng, *shapes())]))
    run("sigmoid", lambda: (lambda a: T.sigmoid(a).sum(), [_rand(rng, *shapes())]))
    run("softplus", lambda: (lambda a: T.softplus(a).sum(), [_rand(rng, *shapes())]))
    run("relu", lambda: (lambda a: T.relu(a).sum(),
                         [away_from(_rand(rng, *shapes()), [0.0])]))
    run("leaky_relu", lambda: (lambda a: T.leaky_relu(a).sum(),
                               [away_from(_rand(rng, *shapes()), [0.0])]))
    run("pow_const", lambda: (lambda a: T.pow_const(a, 3.0).sum(),
                              [rng.uniform(0.3, 1.5, shapes())]))
    run("sin", lambda: (lambda a: T.sin(a).sum(), [_rand(rng, *shapes())]))
    run("cos", lambda: (lambda a: T.cos(a).sum(), [_rand(rng, *shapes())]))
    run("clamp", lambda: (lambda a: T.clamp(a, -0.5, 0.5).sum(),
                          [away_from(_rand(rng, *shapes()), [-0.5, 0.5], 0.05)]))
    def projected(op, in_shape, out_shape):
        # multiply by a fixed random projection so every output element is probed
        proj = T.constant(_rand(rng, *out_shape))
        return (lambda a: (op(a) * proj).sum(), [_rand(rng, *in_shape)])

    run("sum", lambda: (lambda a: a.sum(), [_rand(rng, *shapes())]))
    run("sum_axis", lambda: projected(lambda a: a.sum(axis=0), (3, 4), (4,)))
    run("mean", lambda: (lambda a: a.mean(), [_rand(rng, *shapes())]))
    run("mean_axis", lambda: (lambda a: a.mean(axis=1).sum(), [_rand(rng, 3, 4)]))
    run("max", lambda: (lambda a: a.max(), [_spread(rng, shapes())]))
    run("max_axis", lambda: (lambda a: a.max(axis=0).sum(), [_spread(rng, (3, 4))]))
    run("ordered_sum", lambda: (lambda a: T.ordered_sum(a, axis=0).sum(),
                                [_rand(rng, 4, 3)]))
    run("softmax", lambda: projected(lambda a: T.softmax(a, axis=0), (4, 2), (4, 2)))
    run("matmul", lambda: (lambda a, b: (a @ b).sum(), [_rand(rng, 2, 3), _rand(rng, 3, 2)]))
    run("reshape", lambda: projected(lambda a: a.reshape((6,)), (2, 3), (6,)))
    run("broadcast_to", lambda: projected(lambda a: T.broadcast_to(a, (3, 4)), (1, 4), (3, 4)))

    def concat_case():
        proj = T.constant(_rand(rng, 5, 2))
        return (lambda a, b: (T.concat([a, b], axis=0) * proj).sum(),
                [_rand(rng, 2, 2), _rand(rng, 3, 2)])

    run("concat", concat_case)
    run("slice_axis", lambda: (lambda a: T.slice_axis(a, 0, 1, 3).sum(), [_rand(rng, 4, 2)]))
    run("flip_w", lambda: projected(lambda a: T.flip_w(a), (2, 3), (2, 3)))

    def conv_case():
        s = int(rng.integers(1, 3))
        return (lambda a, w: T.conv2d(a, w, stride=s, padding=1).sum(),
                [_rand(rng, 2, 5, 6), _rand(rng, 3, 2, 3, 3)])

    run("conv2d", conv_case)
    run("avg_pool_global", lambda: (lambda a: T.avg_pool2d(a).sum(), [_rand(rng, 2, 4, 4)]))
    run("avg_pool_window", lambda: (lambda a: T.avg_pool2d(a, 2).sum(), [_rand(rng, 2, 4, 4)]))
    run("upsample_nearest", lambda: projected(lambda a: T.upsample_nearest(a, 2),
                                              (2, 2, 2), (2, 4, 4)))
    run("upsample_bilinear", lambda: projected(lambda a: T.upsample_bilinear(a, 2),
                                               (2, 2, 2), (2, 4, 4)))

    def euler_case():
        proj = T.constant(_rand(rng, 3, 3))
        return (lambda a: (T.euler_rotation(a) * proj).sum(), [rng.uniform(-50, 50, 3)])

    run("euler_rotation", euler_case)
    run("gather_bilinear", lambda: _gather_case(rng))
    run("scatter_bilinear", lambda: _scatter_case(rng))
    return results


def _spread(rng, shape):
    # distinct values so max() ties cannot blur the finite difference
    n = int(np.prod(shape))
    vals = rng.permutation(n) * 0.13 + rng.uniform(-0.05, 0.05)
    return vals.reshape(shape)


def _safe_coords(rng, n, H, W):
    # fractional positions away from bilinear cell boundaries
    x = rng.uniform(0.2, W - 1.2, n)
    y = rng.uniform(0.2, H - 1.2, n)
    x = np.where(np.abs(x - np.round(x)) < 0.1, x + 0.17, x)
    y = np.where(np.abs(y - np.round(y)) < 0.1, y + 0.17, y)
    return x, y


def _gather_case(rng):
    H, W, n = 5, 6, 4
    x, y = _safe_coords(rng, n, H, W)
    proj = _rand(rng, 2, n)

    def f(img, xc, yc):
        return (T.gather_bilinear(img, xc, yc) * T.constant(proj)).sum()

    return f, [_rand(rng, 2, H, W), x, y]


def _scatter_case(rng):
    H, W, n = 5, 6, 4
    x, y = _safe_coords(rng, n, H, W)
    proj = _rand(rng, 2, H, W)

    def f(vals, xc, yc):
        return (T.scatter_bilinear(vals, xc, yc, H, W) * T.constant(proj)).sum()

    return f, [_rand(rng, 2, n), x, y]


def suite_renderer(seed=0):
    from . import renderer as R

    rng = np.random.default_rng(seed)
    cam = R.Camera(height=12, width=12)
    H, W = cam.height, cam.width
    results = []

    d = 1.0 + 0.05 * np.tanh(rng.standard_normal((H, W)))
    a = 0.3 + 0.4 * rng.random((3, H, W))
    proj = rng.standard_normal((3, H, W))

    def f_normals(dd):
        return (R.depth_to_normals(dd, cam) * T.constant(proj)).sum()

    results.append(("depth_to_normals", max(finite_diff_check(f_normals, [d], step=1e-5))))

    light_raw = np.array([0.4, 0.6, 0.2, -0.3])

    def f_shade(aa, lr):
        light = R.Light(k_amb=T.slice_axis(lr, 0, 0, 1), k_diff=T.slice_axis(lr, 0, 1, 2),
                        lx=T.slice_axis(lr, 0, 2, 3), ly=T.slice_axis(lr, 0, 3, 4))
        n = R.depth_to_normals(T.constant(d), cam)
        return R.shade(aa, n, light).sum()

    results.append(("shade", max(finite_diff_check(f_shade, [a, light_raw], step=1e-5))))

    # fractional pose so no splat lands on a bilinear cell boundary
    angles = np.array([7.3, -4.1, 2.6])
    trans = np.array([0.013, -0.009, 0.004])

    def f_render(aa, dd, lr, ang, tr):
        light = R.Light(k_amb=T.slice_axis(lr, 0, 0, 1), k_diff=T.slice_axis(lr, 0, 1, 2),
                        lx=T.slice_axis(lr, 0, 2, 3), ly=T.slice_axis(lr, 0, 3, 4))
        pose = R.Pose(angles_deg=ang, translation=tr)
        out = R.render(aa, dd, light, pose, cam)
        return out.image.sum() + out.depth.sum()

    err = max(finite_diff_check(f_render, [a, d, light_raw, angles, trans], step=1e-5))
    results.append(("render_end_to_end", err))
    return results


def suite_losses(seed=0):
    from . import objectives as O

    rng = np.random.default_rng(seed)
    results = []
    H = W = 6
    target = rng.random((3, H, W))
    # residuals bounded away from zero so |.| is smooth
    pred = np.clip(target + rng.choice([-1.0, 1.0], (3, H, W)) * rng.uniform(0.1, 0.3, (3, H, W)), 0, 1.2)
    sigma = rng.uniform(0.5, 1.5, (H, W))

    def f_recon(p, s):
        return O.recon_nll(p, T.constant(target), s)

    results.append(("recon_nll", max(finite_diff_check(f_recon, [pred, sigma], step=1e-5))))

    weights = rng.choice([0.0, 0.3, 1.0], (H, W), p=[0.2, 0.3, 0.5])
    mask = O.RelaxedMask(weights)

    def f_rcl(p, s):
        return O.relaxed_consistency(p, T.constant(target), s, mask)

    results.append(("relaxed_consistency", max(finite_diff_check(f_rcl, [pred, sigma], step=1e-5))))
    return results


def suite_networks(seed=0):
    from . import networks as N

    rng = np.random.default_rng(seed)
    size, code = 16, 32
    results = []

    enc = N.PyramidEncoder(3, size, code, rng)
    img = rng.random((3, size, size))

    def f_enc(x):
        c, _ = enc.forward(None, x)
        return c.sum()

    results.append(("encoder", max(finite_diff_check(f_enc, [img], step=1e-5))))

    dec = N.PyramidDecoder(code, 1, size, rng, zero_final=False)

    def f_dec(c):
        return dec.forward(None, c).mean()

    results.append(("decoder", max(finite_diff_check(f_dec, [rng.standard_normal(code)], step=1e-5))))

    gate = N.ChannelGate(5, rng)
    gate_proj = T.constant(rng.standard_normal((5, 4, 4)))

    def f_gate(feat):
        return (gate.forward(None, feat) * gate_proj).sum()

    results.append(("attribute_gate", max(finite_diff_check(f_gate, [rng.random((5, 4, 4))], step=1e-5))))

    agg = N.CodeAggregator(code, rng)

    def f_agg(c0, c1, c2):
        return agg.aggregate(None, [c0, c1, c2]).sum()

    codes = [rng.standard_normal(code) for _ in range(3)]
    results.append(("aggregate_codes", max(finite_diff_check(f_agg, codes, step=1e-5))))

    ref = N.RefinerNet(1, size, code, rng)
    canon = 1.0 + 0.05 * np.tanh(rng.standard_normal((1, size, size)))

    def f_ref(t):
        return ref.forward(None, T.constant(canon), t).mean()

    results.append(("refiner_wrt_target", max(finite_diff_check(f_ref, [rng.random((3, size, size))], step=1e-5))))
    return results


SUITE_THRESHOLDS = {
    "primitives": 1e-4,
    "renderer": 1e-3,
    "losses": 1e-5,
    "networks": 1e-4,
}


def run_suites(which="all", seed=0):
    """Run the named suite(s); returns [(suite, check, err, threshold, ok)]."""
    order = ["primitives", "renderer", "losses", "networks"] if which == "all" else [which]
    if any(s not in SUITE_THRESHOLDS for s in order):
        raise ContractError(f"gradcheck: unknown suite {which!r}")
    rows = []
    runners = {
        "primitives": lambda: suite_primitives(seed=seed),
        "renderer": lambda: suite_renderer(seed=seed),
        "losses": lambda: suite_losses(seed=seed),
        "networks": lambda: suite_networks(seed=seed),
    }
    for suite in order:
        thr = SUITE_THRESHOLDS[suite]
        for name, err in runners[suite]():
            rows.append((suite, name, err, thr, err < thr))
    return rows
