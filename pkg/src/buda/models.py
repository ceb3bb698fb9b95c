"""Segmenter, domain-aware generator and domain discriminator.

All three are small MLPs over per-pixel vectors.  Parameters live in an
ordered name -> Tensor mapping so optimizers and checkpoints can walk them in
a fixed order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, ShapeError
from .tensor import Rng, Tensor

CHECKPOINT_MAGIC = b"BUDAMDL1"
LEAKY_SLOPE = 0.01
GENERATOR_HIDDEN = 256


def _he(rng: Rng, fan_in: int, fan_out: int) -> Tensor:
    w = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
    return Tensor(w, requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


class _Module:
    kind = "module"

    def __init__(self, params: dict[str, Tensor], config: dict):
        self.params = dict(params)
        self.config = dict(config)

    def parameters(self, prefix: str = "") -> list[Tensor]:
        return [p for name, p in self.params.items() if name.startswith(prefix)]

    def named_parameters(self):
        return list(self.params.items())

    def copy(self):
        clone = object.__new__(type(self))
        _Module.__init__(clone, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()},
                         self.config)
        return clone

    def state_equal(self, other) -> bool:
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[k].data, other.params[k].data) for k in self.params)

    def frozen(self, name: str) -> Tensor:
        """Parameter value as a constant, so no gradient flows into it."""
        return self.params[name].detach()


class Segmenter(_Module):
    """F = F_cls o F_feat applied independently at every pixel."""

    kind = "segmenter"

    @classmethod
    def init(cls, d_in: int, d_hidden: int, d_f: int, n_classes: int, rng: Rng) -> "Segmenter":
        if min(d_in, d_hidden, d_f, n_classes) < 1:
            raise ShapeError("all segmenter dimensions must be >= 1")
        params = {
            "feat.w1": _he(rng.child("w1"), d_in, d_hidden),
            "feat.b1": _zeros(d_hidden),
            "feat.w2": _he(rng.child("w2"), d_hidden, d_f),
            "feat.b2": _zeros(d_f),
        }
        params.update(_head(d_f, n_classes, rng.child("cls")))
        return cls(params, {"d_in": d_in, "d_hidden": d_hidden, "d_f": d_f, "n_classes": n_classes})

    @property
    def n_classes(self) -> int:
        return self.params["cls.w"].shape[1]

    @property
    def d_in(self) -> int:
        return self.params["feat.w1"].shape[0]

    @property
    def d_f(self) -> int:
        return self.params["feat.w2"].shape[1]

    def features(self, x, frozen: bool = False) -> Tensor:
        """Pixel features for an (n, d_in) batch; post leaky-ReLU."""
        p = self.frozen if frozen else self.params.__getitem__
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeError(f"segmenter expects (n, {self.d_in}) pixels, got {x.shape}")
        h = T.leaky_relu(T.linear(x, p("feat.w1"), p("feat.b1")), LEAKY_SLOPE)
        return T.leaky_relu(T.linear(h, p("feat.w2"), p("feat.b2")), LEAKY_SLOPE)

    def classify(self, feats) -> Tensor:
        feats = feats if isinstance(feats, Tensor) else Tensor(feats)
        return T.linear(feats, self.params["cls.w"], self.params["cls.b"])

    def logits(self, x) -> Tensor:
        return self.classify(self.features(x))

    def replace_head(self, n_classes: int, rng: Rng) -> "Segmenter":
        params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items() if k.startswith("feat.")}
        params.update(_head(self.d_f, n_classes, rng))
        return Segmenter(params, {**self.config, "n_classes": n_classes})

    def predict_proba(self, pixels: np.ndarray) -> np.ndarray:
        return T.softmax_rows(self.logits(Tensor(pixels)).detach()).data


def _head(d_f: int, n_classes: int, rng: Rng) -> dict[str, Tensor]:
    return {"cls.w": _he(rng, d_f, n_classes), "cls.b": _zeros(n_classes)}


def segmenter_forward(F: Segmenter, x) -> tuple[Tensor, Tensor]:
    """Run F on an H x W x d_in grid; returns (features, probabilities) grids."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"expected an H x W x d_in grid, got {x.shape}")
    H, W, d = x.shape
    feats = F.features(T.reshape(x, (H * W, d)))
    probs = T.softmax_rows(F.classify(feats))
    return T.reshape(feats, (H, W, F.d_f)), T.reshape(probs, (H, W, F.n_classes))


class Generator(_Module):
    """Maps (class embedding, noise, domain flag) to a synthetic pixel feature."""

    kind = "generator"

    @classmethod
    def init(cls, d_a: int, d_z: int, d_f: int, rng: Rng, dropout: float = 0.5,
             hidden: int = GENERATOR_HIDDEN) -> "Generator":
        d_in = d_a + d_z + 1
        params = {
            "w1": _he(rng.child("w1"), d_in, hidden),
            "b1": _zeros(hidden),
            "w2": _he(rng.child("w2"), hidden, d_f),
            "b2": _zeros(d_f),
        }
        return cls(params, {"d_a": d_a, "d_z": d_z, "d_f": d_f, "dropout": dropout, "hidden": hidden,
                            "out_shift": [0.0] * d_f, "out_scale": [1.0] * d_f})

    @property
    def d_z(self) -> int:
        return self.config["d_z"]

    def set_output_affine(self, shift, scale) -> None:
        """Fixed per-dimension affine applied to the last layer's output.

        Set from the real feature population so the trainable layers work in
        standardized coordinates.
        """
        self.config["out_shift"] = [float(v) for v in shift]
        self.config["out_scale"] = [float(v) for v in scale]

    def forward(self, a, d, z, train_mode: bool = False, rng: Rng | None = None) -> Tensor:
        """Batch forward: a is (n, d_a) or (d_a,), d a scalar or (n,) of {0, 1}, z (n, d_z)."""
        z = np.atleast_2d(np.asarray(z.data if isinstance(z, Tensor) else z, dtype=float))
        n = z.shape[0]
        a = np.asarray(a, dtype=float)
        a = np.broadcast_to(a, (n, self.config["d_a"])) if a.ndim == 1 else a
        dom = np.broadcast_to(np.asarray(d, dtype=float), (n,)).reshape(n, 1)
        inp = Tensor(np.concatenate([a, z, dom], axis=1))
        h = T.leaky_relu(T.linear(inp, self.params["w1"], self.params["b1"]), LEAKY_SLOPE)
        rate = self.config["dropout"]
        if train_mode and rate > 0:
            if rng is None:
                raise ValueError("train_mode dropout needs an rng")
            mask = (rng.uniform(h.shape) >= rate) / (1.0 - rate)
            h = T.mul(h, mask)
        out = T.linear(h, self.params["w2"], self.params["b2"])
        scale = np.asarray(self.config["out_scale"], dtype=float)
        shift = np.asarray(self.config["out_shift"], dtype=float)
        return T.add_rowvec(T.mul(out, np.broadcast_to(scale, out.shape)), Tensor(shift))


def generator_forward(G: Generator, a, d, z, train_mode: bool = False, rng: Rng | None = None) -> np.ndarray:
    """Single-sample convenience wrapper returning a d_f vector."""
    return G.forward(np.asarray(a)[None, :], d, np.asarray(z)[None, :], train_mode, rng).data[0]


class Discriminator(_Module):
    """Logistic regression on a feature vector: p(source | f)."""

    kind = "discriminator"

    @classmethod
    def init(cls, d_f: int, rng: Rng) -> "Discriminator":
        w = rng.normal((d_f, 1)) * np.sqrt(1.0 / d_f)
        return cls({"w": Tensor(w, requires_grad=True), "b": _zeros(1)}, {"d_f": d_f})

    def logits(self, f, frozen: bool = False) -> Tensor:
        p = self.frozen if frozen else self.params.__getitem__
        f = f if isinstance(f, Tensor) else Tensor(np.atleast_2d(f))
        return T.linear(f, p("w"), p("b"))

    def forward(self, f, frozen: bool = False) -> Tensor:
        return T.sigmoid(self.logits(f, frozen))


def discriminator_forward(D: Discriminator, f) -> float:
    return float(D.forward(np.atleast_2d(f)).data[0, 0])


# ---------------------------------------------------------------- checkpoints

_KINDS = {cls.kind: cls for cls in (Segmenter, Generator, Discriminator)}


def save_checkpoint(model: _Module, path) -> None:
    """Magic, u32 manifest length, JSON manifest, then little-endian f64 arrays."""
    layers = [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()]
    manifest = json.dumps({"kind": model.kind, "config": model.config, "layers": layers}, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for v in model.params.values():
            fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> _Module:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {raw[:8]!r}")
    if len(raw) < 12:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[8:12])
    try:
        manifest = json.loads(raw[12:12 + n])
        cls = _KINDS[manifest["kind"]]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"{path}: unreadable manifest ({exc})") from None
    offset = 12 + n
    params = {}
    for layer in manifest["layers"]:
        shape = tuple(layer["shape"])
        count = int(np.prod(shape)) if shape else 1
        chunk = raw[offset:offset + 8 * count]
        if len(chunk) != 8 * count:
            raise FormatError(f"{path}: truncated at layer {layer['name']}")
        params[layer["name"]] = Tensor(np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape),
                                       requires_grad=True)
        offset += 8 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return cls(params, manifest["config"])
