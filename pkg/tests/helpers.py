"""Shared test utilities: seeded tensors, deviation measures, brute-force oracles.

The oracles here deliberately use plain Python loops or independent numpy
formulations so they cannot share a code path with the implementations they
check.
"""

import numpy as np

from wfcodec import Rng, VideoTensor


def make_random(seed: int, shape) -> VideoTensor:
    return VideoTensor(Rng(seed).normal(shape))


def max_abs_diff(a, b) -> float:
    a = a.data if isinstance(a, VideoTensor) else np.asarray(a)
    b = b.data if isinstance(b, VideoTensor) else np.asarray(b)
    assert a.shape == b.shape, f"shape mismatch {a.shape} vs {b.shape}"
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))))


def conv3d_loop_oracle(x, weight, bias, stride, spatial_pad, pad_mode="replicate"):
    """Nested-loop causal 3D convolution, the reference for causal_conv3d.

    Pads time at the front by k_t - 1 (replicating frame 0 or zeros), pads
    space symmetrically with zeros, then walks every output element with
    explicit loops in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    cout, cin, kt, kh, kw = weight.shape
    st, sh, sw = stride
    ph, pw = spatial_pad
    c, t, h, w = x.shape
    assert c == cin
    lead = np.repeat(x[:, :1], kt - 1, axis=1) if pad_mode == "replicate" else np.zeros(
        (c, kt - 1, h, w)
    )
    xp = np.concatenate([lead, x], axis=1) if kt > 1 else x
    xp = np.pad(xp, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    tp, hp, wp = xp.shape[1:]
    to = (tp - kt) // st + 1
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    out = np.zeros((cout, to, ho, wo))
    for o in range(cout):
        for n in range(to):
            for y in range(ho):
                for z in range(wo):
                    acc = 0.0
                    for i in range(cin):
                        for dt in range(kt):
                            for dy in range(kh):
                                for dx in range(kw):
                                    acc += (
                                        weight[o, i, dt, dy, dx]
                                        * xp[i, n * st + dt, y * sh + dy, z * sw + dx]
                                    )
                    out[o, n, y, z] = acc + bias[o]
    return out


def squared_l2(arr) -> float:
    flat = np.asarray(arr, dtype=np.float64).ravel()
    return float(np.dot(flat, flat))
