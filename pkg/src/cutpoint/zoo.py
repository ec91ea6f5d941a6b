"""Builders for the shipped network encodings.

Each builder returns a network document (see :mod:`cutpoint.graph_ir`).  The
JSON files under ``cutpoint/models`` are generated from these functions with
``python -m cutpoint.zoo``; a test checks they stay in sync.
"""

import json
import math
import os

MODEL_DIR = os.path.join(os.path.dirname(__file__), "models")


class Builder:
    """Appends layers in topological order and tracks channel counts."""

    def __init__(self, name, w, h, c, meta=None):
        self.name = name
        self.input = {"w": w, "h": h, "c": c}
        self.meta = dict(meta or {})
        self.layers = []
        self.channels = {-1: c}
        self.spatial = {-1: (w, h)}

    @property
    def last(self):
        return len(self.layers) - 1

    def _add(self, spec, channels, spatial):
        self.layers.append(spec)
        idx = self.last
        self.channels[idx] = channels
        self.spatial[idx] = spatial
        return idx

    def _src(self, spec, src):
        if src is not None and src != self.last:
            spec["src"] = src
        return self.last if src is None else src

    def conv(self, out_c, k=3, s=1, act="relu", src=None, bn=True, name=""):
        spec = {"kind": "conv", "out_c": out_c}
        if name:
            spec["name"] = name
        if k != 1:
            spec["kernel"] = k
        if s != 1:
            spec["stride"] = s
        if act != "none":
            spec["activation"] = act
        if bn:
            spec["batchnorm_folded"] = True
        src = self._src(spec, src)
        w, h = self.spatial[src]
        return self._add(spec, out_c, (-(-w // s), -(-h // s)))

    def dwconv(self, k=3, s=1, act="relu", src=None, name=""):
        spec = {"kind": "dwconv"}
        if name:
            spec["name"] = name
        if k != 1:
            spec["kernel"] = k
        if s != 1:
            spec["stride"] = s
        if act != "none":
            spec["activation"] = act
        spec["batchnorm_folded"] = True
        src = self._src(spec, src)
        w, h = self.spatial[src]
        return self._add(spec, self.channels[src], (-(-w // s), -(-h // s)))

    def fc(self, out_c, act="none", src=None):
        spec = {"kind": "fc", "out_c": out_c}
        if act != "none":
            spec["activation"] = act
        self._src(spec, src)
        return self._add(spec, out_c, (1, 1))

    def maxpool(self, k=2, s=2, src=None):
        spec = {"kind": "maxpool", "kernel": k, "stride": s}
        src = self._src(spec, src)
        w, h = self.spatial[src]
        return self._add(spec, self.channels[src], (-(-w // s), -(-h // s)))

    def gap(self, src=None):
        spec = {"kind": "avgpool_global"}
        src = self._src(spec, src)
        return self._add(spec, self.channels[src], (1, 1))

    def add(self, shortcut, act="none", src=None):
        spec = {"kind": "eltwise_add", "shortcut_src": shortcut}
        if act != "none":
            spec["activation"] = act
        src = self._src(spec, src)
        return self._add(spec, self.channels[src], self.spatial[src])

    def scale(self, feature, src=None):
        spec = {"kind": "scale", "shortcut_src": feature}
        self._src(spec, src)
        return self._add(spec, self.channels[feature], self.spatial[feature])

    def upsample(self, factor=2, src=None):
        spec = {"kind": "upsample", "stride": factor}
        src = self._src(spec, src)
        w, h = self.spatial[src]
        return self._add(spec, self.channels[src], (w * factor, h * factor))

    def route(self, *srcs):
        spec = {"kind": "concat", "concat_srcs": list(srcs)}
        return self._add(spec, sum(self.channels[s] for s in srcs),
                         self.spatial[srcs[0]])

    def document(self):
        doc = {"name": self.name, "input": self.input}
        if self.meta:
            doc["meta"] = self.meta
        doc["layers"] = self.layers
        return doc


# --------------------------------------------------------------------------


def yolov2(size=416, classes=80):
    """Darknet-19 style YOLOv2 without the passthrough route: 21 convs.

    The 13x13 stage is held at 512 channels, which reproduces the published
    17.18 GOP / ~14 MB-weight operating point of the 21-layer variant.
    """
    b = Builder("yolov2", size, size, 3, {"declared_gop": 17.18})
    a = "leaky"
    b.conv(32, 3, act=a); b.maxpool()
    b.conv(64, 3, act=a); b.maxpool()
    b.conv(128, 3, act=a); b.conv(64, 1, act=a); b.conv(128, 3, act=a); b.maxpool()
    b.conv(256, 3, act=a); b.conv(128, 1, act=a); b.conv(256, 3, act=a); b.maxpool()
    b.conv(512, 3, act=a); b.conv(256, 1, act=a); b.conv(512, 3, act=a)
    b.conv(256, 1, act=a); b.conv(512, 3, act=a); b.maxpool()
    b.conv(512, 3, act=a); b.conv(256, 1, act=a); b.conv(512, 3, act=a)
    b.conv(256, 1, act=a); b.conv(512, 3, act=a)
    b.conv(512, 3, act=a); b.conv(512, 3, act=a)
    b.conv(5 * (classes + 5), 1, act="none", bn=False)
    return b.document()


def vgg16_conv(size=224):
    b = Builder("vgg16_conv", size, size, 3)
    for n, c in ((2, 64), (2, 128), (3, 256), (3, 512), (3, 512)):
        for _ in range(n):
            b.conv(c, 3, bn=False)
        b.maxpool()
    return b.document()


def _bottleneck(b, width, out_c, stride, project):
    entry = b.last
    short = entry
    if project:
        short = b.conv(out_c, 1, stride, act="none")
    b.conv(width, 1, src=entry if project else None)
    b.conv(width, 3, stride)
    b.conv(out_c, 1, act="none")
    return b.add(short, act="relu")


def _resnet_trunk(b, depths):
    b.conv(64, 7, 2)
    b.maxpool(3, 2)
    stages = []
    in_c = 64
    for si, (n, width) in enumerate(zip(depths, (64, 128, 256, 512))):
        out_c = width * 4
        for i in range(n):
            stride = 2 if (i == 0 and si > 0) else 1
            _bottleneck(b, width, out_c, stride, project=(i == 0))
        in_c = out_c
        stages.append(b.last)
    return stages


def resnet(depth=50, size=256):
    depths = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3), 152: (3, 8, 36, 3)}[depth]
    b = Builder(f"resnet{depth}", size, size, 3)
    _resnet_trunk(b, depths)
    b.gap()
    b.fc(1000)
    return b.document()


def darknet53_res(b, c):
    entry = b.last
    b.conv(c // 2, 1, act="leaky")
    b.conv(c, 3, act="leaky")
    return b.add(entry)


def yolov3(size=416, classes=80):
    b = Builder("yolov3", size, size, 3)
    a = "leaky"
    out_c = 3 * (classes + 5)
    b.conv(32, 3, act=a)
    taps = {}
    for c, n in ((64, 1), (128, 2), (256, 8), (512, 8), (1024, 4)):
        b.conv(c, 3, 2, act=a)
        for _ in range(n):
            darknet53_res(b, c)
        taps[c] = b.last

    def head(c):
        b.conv(c, 1, act=a); b.conv(2 * c, 3, act=a)
        b.conv(c, 1, act=a); b.conv(2 * c, 3, act=a)
        mid = b.conv(c, 1, act=a)
        b.conv(2 * c, 3, act=a)
        b.conv(out_c, 1, act="none", bn=False)
        return mid

    mid = head(512)
    b.route(mid)
    b.conv(256, 1, act=a)
    up = b.upsample()
    b.route(up, taps[512])
    mid = head(256)
    b.route(mid)
    b.conv(128, 1, act=a)
    up = b.upsample()
    b.route(up, taps[256])
    head(128)
    return b.document()


def retinanet(size=512, classes=80, anchors=9):
    b = Builder("retinanet", size, size, 3)
    c3, c4, c5 = _resnet_trunk(b, (3, 4, 6, 3))[1:]
    p5_lat = b.conv(256, 1, act="none", bn=False, src=c5)
    p5 = b.conv(256, 3, act="none", bn=False)
    p6 = b.conv(256, 3, 2, act="none", bn=False, src=c5)
    p7 = b.conv(256, 3, 2, act="none", bn=False, src=p6)

    def heads(level):
        for out in (anchors * classes, anchors * 4):
            b.route(level)
            for _ in range(4):
                b.conv(256, 3, bn=False)
            b.conv(out, 3, act="sigmoid" if out == anchors * classes else "none",
                   bn=False)

    heads(p7)
    heads(p6)
    heads(p5)
    lat = p5_lat
    for c in (c4, c3):
        b.route(lat)
        up = b.upsample()
        b.route(c)
        lat = b.conv(256, 1, act="none", bn=False)
        lat = b.add(up)
        p = b.conv(256, 3, act="none", bn=False)
        heads(p)
    return b.document()


# EfficientNet-B0 stage table: expand ratio, kernel, stride, out channels, repeats
_EFFNET_B0 = ((1, 3, 1, 16, 1), (6, 3, 2, 24, 2), (6, 5, 2, 40, 2),
              (6, 3, 2, 80, 3), (6, 5, 1, 112, 3), (6, 5, 2, 192, 4),
              (6, 3, 1, 320, 1))


def _mbconv(b, in_c, out_c, expand, k, stride):
    entry = b.last
    a = "swish"
    mid = in_c * expand
    if expand != 1:
        b.conv(mid, 1, act=a)
    dw = b.dwconv(k, stride, act=a)
    b.gap()
    b.fc(max(1, int(in_c * 0.25)), act=a)
    b.fc(mid, act="sigmoid")
    b.scale(dw)
    b.conv(out_c, 1, act="none")
    if stride == 1 and in_c == out_c:
        b.add(entry)


def efficientnet(variant="b1", size=256):
    depth_mult = {"b0": 1.0, "b1": 1.1}[variant]
    b = Builder(f"efficientnet_{variant}", size, size, 3)
    b.conv(32, 3, 2, act="swish")
    in_c = 32
    for expand, k, s, out_c, reps in _EFFNET_B0:
        for i in range(int(math.ceil(depth_mult * reps))):
            _mbconv(b, in_c, out_c, expand, k, s if i == 0 else 1)
            in_c = out_c
    b.conv(1280, 1, act="swish")
    b.gap()
    b.fc(1000)
    return b.document()


BUILDERS = {
    "yolov2": yolov2,
    "vgg16_conv": vgg16_conv,
    "yolov3": yolov3,
    "resnet50": lambda: resnet(50),
    "resnet152": lambda: resnet(152),
    "retinanet": retinanet,
    "efficientnet_b1": efficientnet,
}


def model_path(name):
    return os.path.join(MODEL_DIR, f"{name}.json")


def shipped_models():
    return tuple(BUILDERS)


def write_models(directory=MODEL_DIR):
    from .graph_ir import parse_network, serialize_network

    os.makedirs(directory, exist_ok=True)
    for name, build in BUILDERS.items():
        text = serialize_network(parse_network(build()))
        with open(os.path.join(directory, f"{name}.json"), "w") as fh:
            fh.write(text)


if __name__ == "__main__":
    write_models()
    print("\n".join(json.dumps(n) for n in BUILDERS))
