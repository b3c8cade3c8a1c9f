"""Feature extractor, global geometry net and local refinement net.

Each network is a flat :class:`NetworkSpec` layer list interpreted by
:func:`run_network`. Skip connections use named ``save``/``concat`` pairs;
``coords`` appends fixed normalized lattice coordinates as extra channels.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .core import ops
from .core.autodiff import param
from .core.checkpoint import (adam_from_tensors, adam_to_tensors, decode_text, encode_text,
                              load_tensors, save_tensors)
from .mesh.hierarchy import hierarchy_from_tensors, hierarchy_to_tensors

FEATURE_CHANNELS = 8
LEAKY_SLOPE = 0.01


@dataclass(frozen=True)
class Layer:
    kind: str             # conv | leaky_relu | upsample | save | concat | coords
    name: str = ""
    cin: int = 0
    cout: int = 0
    kernel: int = 1
    stride: int = 1


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    nsp: int              # spatial rank, 2 or 3
    in_channels: int
    layers: tuple

    def __post_init__(self):
        self.validate()

    def validate(self):
        """Walk the layer list tracking channels; raises on any mismatch."""
        c = self.in_channels
        saved = {}
        names = set()
        for L in self.layers:
            if L.kind == "conv":
                if L.cin != c:
                    raise ValueError(f"{self.name}/{L.name}: expects {L.cin} channels, gets {c}")
                if L.kernel % 2 == 0:
                    raise ValueError(f"{self.name}/{L.name}: kernel must be odd")
                if L.name in names:
                    raise ValueError(f"{self.name}: duplicate layer name {L.name!r}")
                names.add(L.name)
                c = L.cout
            elif L.kind == "save":
                saved[L.name] = c
            elif L.kind == "concat":
                if L.name not in saved:
                    raise ValueError(f"{self.name}: concat of unsaved tensor {L.name!r}")
                c += saved[L.name]
            elif L.kind == "coords":
                c += self.nsp
            elif L.kind not in ("leaky_relu", "upsample"):
                raise ValueError(f"{self.name}: unknown layer kind {L.kind!r}")
        return c

    @property
    def out_channels(self):
        return self.validate()

    @property
    def downsampling(self):
        f = 1
        for L in self.layers:
            if L.kind == "conv":
                f *= L.stride
        return f

    def param_shapes(self):
        out = {}
        for L in self.layers:
            if L.kind == "conv":
                out[f"{self.name}/{L.name}/w"] = (L.cout, L.cin) + (L.kernel,) * self.nsp
                out[f"{self.name}/{L.name}/b"] = (L.cout,)
        return out


def _conv(name, cin, cout, k=1, s=1):
    return Layer("conv", name, cin, cout, k, s)


ACT = Layer("leaky_relu")
UP = Layer("upsample")


def extractor_spec(widths=(16, 32, 16)):
    """2D encoder-decoder, two stride-2 stages, 8 output channels at input resolution."""
    w0, w1, wd = widths
    return NetworkSpec("extractor", 2, 3, (
        Layer("save", "input"),
        _conv("e0", 3, w0, 3, 2), ACT, Layer("save", "s0"),
        _conv("e1", w0, w1, 3, 2), ACT,
        UP, Layer("concat", "s0"), _conv("d1", w1 + w0, wd), ACT,
        UP, Layer("concat", "input"), _conv("out", wd + 3, FEATURE_CHANNELS),
    ))


def _hourglass(name, cin, cout, widths, coords):
    """3D hourglass: pointwise stem, two stride-2 stages, pointwise skip decoders."""
    w0, w1, w2, d2, d1 = widths
    head = [Layer("coords")] if coords else []
    c0 = cin + (3 if coords else 0)
    return NetworkSpec(name, 3, cin, tuple(head + [
        _conv("e0", c0, w0), ACT, Layer("save", "s0"),
        _conv("e1", w0, w1, 3, 2), ACT, Layer("save", "s1"),
        _conv("e2", w1, w2, 3, 2), ACT,
        UP, Layer("concat", "s1"), _conv("d2", w2 + w1, d2), ACT,
        UP, Layer("concat", "s0"), _conv("d1", d2 + w0, d1), ACT,
        _conv("out", d1, cout),
    ]))


def global_spec(c_f, n0, widths=(16, 32, 32, 32, 32), coords=True):
    return _hourglass("global", c_f, n0, widths, coords)


def local_spec(c_f, widths=(8, 16, 16, 16, 8), coords=True):
    return _hourglass("local", c_f, 1, widths, coords)


_coord_cache = {}


def _coord_channels(nsp, spatial):
    key = (nsp, spatial)
    if key not in _coord_cache:
        axes = [np.linspace(-1.0, 1.0, n) for n in spatial]
        mesh = np.meshgrid(*axes, indexing="ij")
        # channel order x, y, (z): reverse of the [.., D, H, W] axis order
        _coord_cache[key] = np.stack(mesh[::-1])
    return _coord_cache[key]


def run_network(spec, params, x):
    """Apply ``spec`` to ``x`` (``[C, *S]`` or ``[B, C, *S]``)."""
    v = x.value
    if v.shape[-spec.nsp - 1] != spec.in_channels:
        raise ValueError(f"{spec.name}: input shape {v.shape} needs {spec.in_channels} channels")
    f = spec.downsampling
    if any(n % f for n in v.shape[-spec.nsp:]):
        raise ValueError(f"{spec.name}: spatial extents {v.shape[-spec.nsp:]} not divisible by {f}")
    cax = x.value.ndim - spec.nsp - 1
    saved = {}
    for L in spec.layers:
        if L.kind == "conv":
            w = params[f"{spec.name}/{L.name}/w"]
            b = params[f"{spec.name}/{L.name}/b"]
            x = ops.convnd(x, w, b, stride=L.stride, padding=L.kernel // 2)
        elif L.kind == "leaky_relu":
            x = ops.leaky_relu(x, LEAKY_SLOPE)
        elif L.kind == "upsample":
            x = ops.upsample_nearest(x, spec.nsp, 2)
        elif L.kind == "save":
            saved[L.name] = x
        elif L.kind == "concat":
            x = ops.concat([x, saved[L.name]], axis=cax)
        elif L.kind == "coords":
            c = _coord_channels(spec.nsp, x.value.shape[-spec.nsp:])
            c = np.broadcast_to(c, x.value.shape[:cax] + c.shape)
            x = ops.concat([x, c], axis=cax)
    return x


# ------------------------------------------------------------------ params

@dataclass
class NetConfig:
    extractor_widths: list = field(default_factory=lambda: [16, 32, 16])
    global_widths: list = field(default_factory=lambda: [16, 32, 32, 32, 32])
    local_widths: list = field(default_factory=lambda: [8, 16, 16, 16, 8])
    coords: bool = True

    def specs(self, n0, fused_channels):
        return (extractor_spec(tuple(self.extractor_widths)),
                global_spec(fused_channels, n0, tuple(self.global_widths), self.coords),
                local_spec(fused_channels, tuple(self.local_widths), self.coords))


def fused_channels(fusion):
    return 2 * FEATURE_CHANNELS if fusion == "mean_std" else FEATURE_CHANNELS


def init_params(spec, seed):
    """He-uniform weights (+-sqrt(6 / fan_in)), zero biases; one RNG stream per network."""
    rng = np.random.default_rng([seed, sum(map(ord, spec.name))])
    out = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("/b"):
            out[name] = param(np.zeros(shape), name)
        else:
            fan_in = int(np.prod(shape[1:]))
            lim = np.sqrt(6.0 / fan_in)
            out[name] = param(rng.uniform(-lim, lim, size=shape), name)
    return out


class ModelParams:
    """Parameters of all three networks plus the configuration they were built for."""

    def __init__(self, config, hierarchy, params=None, seed=0):
        self.config = config          # pipeline.PipelineConfig
        self.hierarchy = hierarchy
        n0 = hierarchy.vertex_counts[0]
        self.extractor, self.global_net, self.local_net = config.net.specs(n0, fused_channels(config.fusion))
        if params is None:
            params = {}
            for s in (self.extractor, self.global_net, self.local_net):
                params.update(init_params(s, seed))
        expected = set()
        for s in (self.extractor, self.global_net, self.local_net):
            for name, shape in s.param_shapes().items():
                expected.add(name)
                if name not in params:
                    raise ValueError(f"missing parameter {name!r}")
                if params[name].value.shape != shape:
                    raise ValueError(f"parameter {name!r} has shape {params[name].value.shape}, expected {shape}")
        extra = set(params) - expected
        if extra:
            raise ValueError(f"unexpected parameters: {sorted(extra)}")
        self.params = params

    def group(self, prefix):
        return {k: v for k, v in self.params.items() if k.startswith(prefix + "/")}

    def copy(self):
        return ModelParams(self.config, self.hierarchy,
                           {k: param(v.value.copy(), k) for k, v in self.params.items()})

    def save(self, path, adam=None, extra=None):
        t = {k: v.value for k, v in sorted(self.params.items())}
        t["meta/config"] = encode_text(json.dumps(self.config.to_dict(), sort_keys=True))
        t.update(hierarchy_to_tensors(self.hierarchy))
        if adam is not None:
            t.update(adam_to_tensors(adam))
        for k, v in (extra or {}).items():
            t[k] = np.asarray(v, dtype=np.float64)
        save_tensors(path, t)

    @classmethod
    def load(cls, path, expect_config=None):
        """Returns ``(model, adam_state_or_None, tensors)``."""
        from .pipeline import PipelineConfig
        t = load_tensors(path)
        cfg = PipelineConfig.from_dict(json.loads(decode_text(t["meta/config"])))
        if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
            raise ValueError("checkpoint configuration does not match the requested configuration")
        hier = hierarchy_from_tensors(t)
        names = [k for k in t if k.split("/")[0] in ("extractor", "global", "local")]
        params = {k: param(t[k].copy(), k) for k in names}
        adam = adam_from_tensors(t) if "adam/step" in t else None
        return cls(cfg, hier, params), adam, t
