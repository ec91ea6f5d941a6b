"""Independent oracles: slow, obvious re-derivations used only by tests."""

import math


def naive_conv(x, w, b, stride, shift, dw=False):
    """Plain nested loops over Python ints.  x: [c][h][w] lists."""
    c_n, h, wd = len(x), len(x[0]), len(x[0][0])
    k = len(w[0][0]) if not dw else len(w[0])
    oh, ow = math.ceil(h / stride), math.ceil(wd / stride)
    pt = max((oh - 1) * stride + k - h, 0) // 2
    pl = max((ow - 1) * stride + k - wd, 0) // 2
    out_c = c_n if dw else len(w)
    out = []
    for o in range(out_c):
        plane = []
        for oy in range(oh):
            row = []
            for ox in range(ow):
                acc = int(b[o])
                chans = [o] if dw else range(c_n)
                for c in chans:
                    for ky in range(k):
                        for kx in range(k):
                            iy, ix = oy * stride + ky - pt, ox * stride + kx - pl
                            if 0 <= iy < h and 0 <= ix < wd:
                                wv = w[o][ky][kx] if dw else w[o][c][ky][kx]
                                acc += int(x[c][iy][ix]) * int(wv)
                row.append(round_shift_saturate(acc, shift))
            plane.append(row)
        out.append(plane)
    return out


def round_shift_saturate(v, shift):
    """Round half away from zero after dividing by 2**shift, clamp to int8."""
    if shift:
        q = abs(v) / (1 << shift)
        r = math.floor(q + 0.5)
        v = r if v >= 0 else -r
    return max(-128, min(127, v))


def bram18k(depth, width):
    return math.ceil(depth / 1024) * math.ceil(width / 18)


def conv_cycles_counter(out_c, in_c, out_h, out_w, k, t, products, kernels):
    """Count MAC-array steps by walking the tiled loop nest."""
    steps = 0
    for _to in range(0, out_c, t):
        for _ti in range(0, in_c, t):
            for _y in range(out_h):
                for _x in range(out_w):
                    for _k in range(k * k):
                        steps += 1
    return -(-steps // (products * kernels))


def tensor_bytes(shape, q_a=8):
    w, h, c = shape
    return w * h * c * q_a // 8
