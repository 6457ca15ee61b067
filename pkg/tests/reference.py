"""Independent reference implementations used as test oracles.

Everything here is written against the math directly (nested loops,
scipy primitives, arbitrary-precision arithmetic) and deliberately
shares no code with the package under test.
"""
from __future__ import annotations

import numpy as np


def conv2d_loops(x, w, stride=1, padding=0, groups=1):
    """Nested-loop 2d convolution (cross-correlation), O(N*OC*K^2*OH*OW)."""
    n, c, h, wd = x.shape
    oc, cg, kh, kw = w.shape
    assert c % groups == 0 and oc % groups == 0
    assert cg == c // groups
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=x.dtype)
    ocg = oc // groups
    for ni in range(n):
        for o in range(oc):
            g = o // ocg
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cg):
                        for a in range(kh):
                            for b in range(kw):
                                acc += (
                                    xp[ni, g * cg + ci, i * stride + a, j * stride + b]
                                    * w[o, ci, a, b]
                                )
                    out[ni, o, i, j] = acc
    return out


def conv2d_scipy(x, w, stride=1, padding=0, groups=1):
    """Grouped conv via scipy.signal.correlate2d (1x1 kernels via tensordot)."""
    from scipy.signal import correlate2d

    n, c, h, wd = x.shape
    oc, cg, kh, kw = w.shape
    ocg = oc // groups
    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        out = np.empty((n, oc, h, wd), dtype=np.float64)
        for g in range(groups):
            xg = x[:, g * cg:(g + 1) * cg]
            wg = w[g * ocg:(g + 1) * ocg, :, 0, 0]
            out[:, g * ocg:(g + 1) * ocg] = np.tensordot(wg, xg, axes=([1], [1])).transpose(1, 0, 2, 3)
        return out
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=np.float64)
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for ni in range(n):
        for o in range(oc):
            g = o // ocg
            full = np.zeros((h + 2 * padding - kh + 1, wd + 2 * padding - kw + 1))
            for ci in range(cg):
                full += correlate2d(xp[ni, g * cg + ci], w[o, ci], mode="valid")
            out[ni, o] = full[::stride, ::stride][:oh, :ow]
    return out


def softmax_xent_mpmath(logits, labels, dps=40):
    """Cross-entropy at `dps` decimal digits via mpmath."""
    import mpmath

    with mpmath.workdps(dps):
        total = mpmath.mpf(0)
        for row, lab in zip(logits, labels):
            exps = [mpmath.exp(mpmath.mpf(float(v))) for v in row]
            s = mpmath.fsum(exps)
            total += -mpmath.log(exps[int(lab)] / s)
        return float(total / len(labels))


def finite_difference_gradients(loss_fn, params, step=1e-5):
    """Central-difference gradient of loss_fn() w.r.t. each array in `params`.

    `params` maps name -> np.ndarray (float64, mutated in place and restored);
    loss_fn takes no arguments and must re-read the arrays on every call.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        grads[name] = g
    return grads


def assert_grads_close(analytic, numeric, rel_tol=1e-4, abs_floor=1e-7):
    """Check per-entry |a-n| <= abs_floor + rel_tol*max(|a|,|n|), report worst."""
    worst = ("", 0.0)
    for name, num in numeric.items():
        ana = analytic[name]
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), abs_floor / rel_tol)
        err = np.abs(ana - num) / denom
        m = float(err.max()) if err.size else 0.0
        if m > worst[1]:
            worst = (name, m)
    assert worst[1] <= rel_tol, f"gradient mismatch on {worst[0]}: rel err {worst[1]:.3e}"


def pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.corrcoef(a, b)[0, 1])


# geometry is restated here on purpose: if the package's module definitions
# drift, the composed-network oracle must catch it
_REF_MBCONV = {
    "MBConv-3F-3K": (3, 3),
    "MBConv-3F-6K": (3, 6),
    "MBConv-5F-3K": (5, 3),
    "MBConv-5F-6K": (5, 6),
}


def _ref_affine_relu6(h, weights, name, activate=True):
    scale = weights[f"{name}.scale"][None, :, None, None]
    shift = weights[f"{name}.shift"][None, :, None, None]
    h = h * scale + shift
    return np.clip(h, 0.0, 6.0) if activate else h


def _ref_module(cell, kind, weights, h):
    p = f"cell{cell.index}.{kind}"
    if kind == "BasicConv":
        y = conv2d_scipy(h, weights[f"{p}.conv.w"], stride=cell.stride, padding=1)
        return _ref_affine_relu6(y, weights, f"{p}.norm")
    k, expansion = _REF_MBCONV[kind]
    hidden = cell.in_channels * expansion
    y = conv2d_scipy(h, weights[f"{p}.expand.w"])
    y = _ref_affine_relu6(y, weights, f"{p}.expand_norm")
    y = conv2d_scipy(y, weights[f"{p}.dw.w"], stride=cell.stride, padding=k // 2, groups=hidden)
    y = _ref_affine_relu6(y, weights, f"{p}.dw_norm")
    y = conv2d_scipy(y, weights[f"{p}.project.w"])
    y = _ref_affine_relu6(y, weights, f"{p}.project_norm", activate=False)
    if cell.stride == 1 and cell.in_channels == cell.out_channels:
        y = y + h
    return y


def standalone_forward(spec, weights, bits, x):
    """Compose a plain network from only the selected modules (scipy convs)."""
    x = np.asarray(x, dtype=np.float64)
    h = conv2d_scipy(x, weights["stem.conv.w"], stride=1, padding=1)
    h = _ref_affine_relu6(h, weights, "stem.norm")
    idx = 0
    for cell in spec.cells:
        acc = None
        for kind in cell.enabled_kinds:
            if bits[idx]:
                y = _ref_module(cell, kind, weights, h)
                acc = y if acc is None else acc + y
            idx += 1
        assert acc is not None, f"cell {cell.index} has no selected module"
        h = acc
    pooled = h.mean(axis=(2, 3))
    return pooled @ weights["head.fc.w"] + weights["head.fc.b"]
