"""SOE-Net forward pipeline.

cloud -> PointOE (OE unit + shared MLP per stage) -> self-attention ->
NetVLAD -> FC -> L2 normalization.

Functions without a ``_forward`` suffix record onto a :class:`~soenet.diffcore.Tape`
and return tensors, so training can differentiate through them; the
``*_forward`` variants take and return plain arrays.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from soenet import diffcore as dc
from soenet.diffcore import Tape, Tensor
from soenet.errors import FormatError, ShapeError
from soenet.geometry import PointCloud, s8n_neighbors

INTRA_EPS = 1e-12  # empty clusters give all-zero residual blocks

CONFIG_KEYS = ("n_points", "mlp_dims", "vlad_k", "out_dim", "s8n_radius", "precision")


@dataclass(frozen=True)
class ModelConfig:
    n_points: int = 256
    mlp_dims: tuple[int, ...] = (16, 32, 64, 128)
    vlad_k: int = 8
    out_dim: int = 32
    s8n_radius: float = 0.2
    precision: str = "float32"
    use_oe: bool = True
    use_attention: bool = True

    def __post_init__(self):
        object.__setattr__(self, "mlp_dims", tuple(int(d) for d in self.mlp_dims))
        if self.n_points < 1 or self.vlad_k < 1 or self.out_dim < 1 or not self.mlp_dims:
            raise ValueError("model extents must be >= 1")
        if min(self.mlp_dims) < 1:
            raise ValueError("mlp_dims entries must be >= 1")
        if self.out_dim > self.vlad_k * self.mlp_dims[-1]:
            raise ValueError("out_dim cannot exceed vlad_k * last stage width")
        if self.s8n_radius <= 0:
            raise ValueError("s8n_radius must be positive")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        base = dict(n_points=4096, mlp_dims=(64, 128, 256, 1024), vlad_k=64, out_dim=256)
        base.update(overrides)
        return cls(**base)

    @property
    def width(self) -> int:
        return self.mlp_dims[-1]

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mlp_dims"] = list(self.mlp_dims)
        return d

    def to_text(self) -> str:
        return "".join(
            f"{k}={','.join(map(str, self.mlp_dims)) if k == 'mlp_dims' else getattr(self, k)}\n"
            for k in CONFIG_KEYS
        )

    @classmethod
    def from_text(cls, text: str, **overrides) -> "ModelConfig":
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"config line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise FormatError(f"config line {lineno}: unknown key {key!r}")
            try:
                if key == "mlp_dims":
                    values[key] = tuple(int(v) for v in val.split(","))
                elif key == "s8n_radius":
                    values[key] = float(val)
                elif key == "precision":
                    values[key] = val
                else:
                    values[key] = int(val)
            except ValueError:
                raise FormatError(f"config line {lineno}: bad value for {key}") from None
        values.update(overrides)
        return cls(**values)

    @classmethod
    def from_file(cls, path, **overrides) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(), **overrides)


# --------------------------------------------------------------------------
# parameters


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for s, c_out in enumerate(config.mlp_dims):
        if config.use_oe:
            shapes[f"oe{s}.w_x"] = (2, 1, 1, c_in)
            shapes[f"oe{s}.w_y"] = (1, 2, 1, c_in)
            shapes[f"oe{s}.w_z"] = (1, 1, 2, c_in)
            shapes[f"oe{s}.b_x"] = (c_in,)
            shapes[f"oe{s}.b_y"] = (c_in,)
            shapes[f"oe{s}.b_z"] = (c_in,)
        shapes[f"mlp{s}.weight"] = (c_in, c_out)
        shapes[f"mlp{s}.bias"] = (c_out,)
        c_in = c_out
    c = config.width
    if config.use_attention:
        for proj in ("x", "y", "z"):
            shapes[f"attn.{proj}.weight"] = (c, c)
            shapes[f"attn.{proj}.bias"] = (c,)
        shapes["attn.mu"] = (1,)
    shapes["vlad.centers"] = (config.vlad_k, c)
    shapes["vlad.assign.weight"] = (c, config.vlad_k)
    shapes["vlad.assign.bias"] = (config.vlad_k,)
    shapes["head.weight"] = (c * config.vlad_k, config.out_dim)
    return shapes


def _init_bound(shape: tuple[int, ...], relu: bool) -> float:
    fan_in, fan_out = shape[0], shape[1]
    return np.sqrt(6.0 / fan_in) if relu else np.sqrt(6.0 / (fan_in + fan_out))


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Initial parameters.

    * OE taps: U(0, 1) per tap, so every depthwise conv starts as a random
      positive blend of its two cells and no channel is dead on
      nonnegative input; biases zero except ``oe0.b_x`` = 1, which keeps
      the first conv (on signed coordinates) in its linear range.
    * MLP weights (followed by ReLU): U(+-sqrt(6 / fan_in)).
    * attention projections, assignment layer, centers and head:
      U(+-sqrt(6 / (fan_in + fan_out))).
    * all other biases and the attention scale: 0.
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.startswith("oe") and ".w_" in name:
            params[name] = rng.uniform(0.0, 1.0, size=shape).astype(np.float32)
        elif name == "oe0.b_x":
            params[name] = np.ones(shape, dtype=np.float32)
        elif ".b_" in name or name.endswith("bias") or name == "attn.mu":
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = _init_bound(shape, relu=name.startswith("mlp"))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return params


def validate_params(params: dict[str, np.ndarray], config: ModelConfig) -> None:
    expected = param_shapes(config)
    missing = [k for k in expected if k not in params]
    extra = [k for k in params if k not in expected]
    if missing or extra:
        raise ShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"tensor {name!r} has shape {tuple(params[name].shape)}, config needs {shape}")


def infer_config(params: dict[str, np.ndarray], **overrides) -> ModelConfig:
    """Recover the architecture from tensor shapes (radius/precision from overrides)."""
    try:
        stages = sorted(int(k[3:].split(".")[0]) for k in params if k.startswith("mlp") and k.endswith(".weight"))
        dims = tuple(params[f"mlp{s}.weight"].shape[1] for s in stages)
        k, _ = params["vlad.centers"].shape
        d = params["head.weight"].shape[1]
    except (KeyError, ValueError) as exc:
        raise ShapeError(f"checkpoint does not describe an SOE-Net model ({exc})") from None
    cfg = ModelConfig(
        mlp_dims=dims,
        vlad_k=k,
        out_dim=d,
        use_oe="oe0.w_x" in params,
        use_attention="attn.mu" in params,
    )
    cfg = replace(cfg, **overrides)
    validate_params(params, cfg)
    return cfg


def save_params(params: dict[str, np.ndarray], path) -> None:
    dc.write_tensors(path, {k: np.asarray(v, dtype=np.float32) for k, v in params.items()})


def load_params(path, config: ModelConfig | None = None) -> dict[str, np.ndarray]:
    params = dc.read_tensors(path)
    if config is not None:
        validate_params(params, config)
    return params


# --------------------------------------------------------------------------
# tape-level building blocks


def oe_unit(features: Tensor, table: np.ndarray, p: dict[str, Tensor], prefix: str) -> Tensor:
    n, c = features.shape
    v = dc.reshape(dc.gather_rows(features, table), (n, 2, 2, 2, c))
    v = dc.relu(dc.oe_conv(v, p[f"{prefix}.w_x"], p[f"{prefix}.b_x"]))  # (N, 2, 2, C)
    v = dc.relu(dc.oe_conv(v, p[f"{prefix}.w_y"], p[f"{prefix}.b_y"]))  # (N, 2, C)
    return dc.relu(dc.oe_conv(v, p[f"{prefix}.w_z"], p[f"{prefix}.b_z"]))  # (N, C)


def pointoe(points: Tensor, table: np.ndarray | None, p: dict[str, Tensor], config: ModelConfig) -> Tensor:
    x = points
    for s in range(len(config.mlp_dims)):
        if config.use_oe:
            x = oe_unit(x, table, p, f"oe{s}")
        x = dc.relu(dc.linear(x, p[f"mlp{s}.weight"], p[f"mlp{s}.bias"]))
    return x


def self_attention(features: Tensor, p: dict[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Returns (mu * W^T Z + F, W) with W[j, i] a softmax over i for each row j."""
    x = dc.linear(features, p["attn.x.weight"], p["attn.x.bias"])
    y = dc.linear(features, p["attn.y.weight"], p["attn.y.bias"])
    z = dc.linear(features, p["attn.z.weight"], p["attn.z.bias"])
    w = dc.softmax(dc.matmul(y, dc.transpose(x)))
    attended = dc.matmul(dc.transpose(w), z)
    return dc.add(dc.mul(attended, p["attn.mu"]), features), w


def netvlad(features: Tensor, p: dict[str, Tensor]) -> Tensor:
    assign = dc.softmax(dc.linear(features, p["vlad.assign.weight"], p["vlad.assign.bias"]))
    blocks = dc.l2_normalize(dc.vlad_residuals(features, assign, p["vlad.centers"]), eps=INTRA_EPS)
    k, c = blocks.shape
    return dc.l2_normalize(dc.reshape(blocks, (k * c,)))


def head(vlad: Tensor, p: dict[str, Tensor]) -> Tensor:
    y = dc.matmul(dc.reshape(vlad, (1, vlad.shape[0])), p["head.weight"])
    return dc.l2_normalize(dc.reshape(y, (y.shape[1],)))


def soenet(points: Tensor, table: np.ndarray | None, p: dict[str, Tensor], config: ModelConfig) -> Tensor:
    f = pointoe(points, table, p, config)
    if config.use_attention:
        f, _ = self_attention(f, p)
    return head(netvlad(f, p), p)


def neighbor_table(cloud: PointCloud | np.ndarray, config: ModelConfig) -> np.ndarray | None:
    if not config.use_oe:
        return None
    return s8n_neighbors(cloud, config.s8n_radius)


# --------------------------------------------------------------------------
# array-level entry points


def _points(cloud) -> np.ndarray:
    return cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)


def _tape_with(params: dict[str, np.ndarray], names=None) -> tuple[Tape, dict[str, Tensor]]:
    tape = Tape()
    keys = params if names is None else [k for k in params if any(k.startswith(n) for n in names)]
    return tape, {k: tape.param(k, params[k]) for k in keys}


def oe_unit_forward(features: np.ndarray, table: np.ndarray, params: dict[str, np.ndarray], prefix: str = "oe0") -> np.ndarray:
    tape, p = _tape_with(params, [prefix + "."])
    return oe_unit(tape.input("features", features), table, p, prefix).value


def pointoe_forward(cloud, params: dict[str, np.ndarray], config: ModelConfig, table=None) -> np.ndarray:
    pts = _points(cloud)
    if table is None:
        table = neighbor_table(pts, config)
    tape, p = _tape_with(params)
    return pointoe(tape.input("points", pts), table, p, config).value


def self_attention_forward(features: np.ndarray, params: dict[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    tape, p = _tape_with(params, ["attn."])
    out, w = self_attention(tape.input("features", features), p)
    return out.value, w.value


def netvlad_forward(features: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    tape, p = _tape_with(params, ["vlad."])
    return netvlad(tape.input("features", features), p).value


def head_forward(vlad: np.ndarray, params: dict[str, np.ndarray]) -> np.ndarray:
    tape, p = _tape_with(params, ["head."])
    return head(tape.input("vlad", vlad), p).value


def soenet_forward(cloud, params: dict[str, np.ndarray], config: ModelConfig, table=None) -> np.ndarray:
    """Global descriptor of one cloud as a unit-norm vector of length ``out_dim``."""
    pts = _points(cloud)
    if table is None:
        table = neighbor_table(pts, config)
    with dc.precision(config.precision):
        tape, p = _tape_with(params)
        return soenet(tape.input("points", pts), table, p, config).value
