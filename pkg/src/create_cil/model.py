"""Feature extractor and the per-class auto-encoder classifier.

The auto-encoders act on feature vectors, so the 1x1 convolutions of a
convolutional head are plain linear maps here.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .numerics import Tensor, ops

DECODER_ACTIVATIONS = ("tanh", "linear")
ERROR_NORMS = ("l2", "sq_l2")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(fan_out, fan_in)), requires_grad=True)


def _frozen(t: Tensor, trainable: bool) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=trainable)


# -- feature extractor ---------------------------------------------------------


@dataclass
class FeatureExtractor:
    """tanh MLP; the final tanh keeps features inside (-1, 1)."""

    weights: list[Tensor]
    biases: list[Tensor]

    @classmethod
    def create(cls, input_dim: int, hidden: Sequence[int], feature_dim: int, seed: int) -> "FeatureExtractor":
        rng = np.random.default_rng([seed, 0x5EED])
        widths = [input_dim, *hidden, feature_dim]
        weights = [_uniform(rng, o, i) for i, o in zip(widths[:-1], widths[1:])]
        biases = [Tensor(np.zeros(o), requires_grad=True) for o in widths[1:]]
        return cls(weights, biases)

    @classmethod
    def zeros(cls, input_dim: int, hidden: Sequence[int], feature_dim: int) -> "FeatureExtractor":
        widths = [input_dim, *hidden, feature_dim]
        return cls(
            [Tensor(np.zeros((o, i)), requires_grad=True) for i, o in zip(widths[:-1], widths[1:])],
            [Tensor(np.zeros(o), requires_grad=True) for o in widths[1:]],
        )

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden(self) -> tuple[int, ...]:
        return tuple(w.shape[0] for w in self.weights[:-1])

    def parameters(self) -> list[Tensor]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"extractor/{i}/w"] = w
            named[f"extractor/{i}/b"] = b
        return named

    def clone(self, trainable: bool = False) -> "FeatureExtractor":
        return FeatureExtractor(
            [_frozen(w, trainable) for w in self.weights], [_frozen(b, trainable) for b in self.biases]
        )

    def __call__(self, x) -> Tensor:
        return extract(self, x)


def extract(extractor: FeatureExtractor, x) -> Tensor:
    h = _as_tensor(x)
    if h.ndim != 2 or h.shape[1] != extractor.input_dim:
        raise ValueError(f"extract: input of shape {h.shape}, extractor expects (n, {extractor.input_dim})")
    for w, b in zip(extractor.weights, extractor.biases):
        h = ops.tanh(ops.add_bias(ops.matmul(h, ops.transpose(w)), b))
    return h


# -- auto-encoder bank ---------------------------------------------------------


@dataclass
class ClassAutoEncoder:
    enc_w: Tensor  # (l, d)
    enc_b: Tensor  # (l,)
    dec_w: Tensor  # (d, l)
    dec_b: Tensor  # (d,)
    decoder_activation: str = "tanh"

    @property
    def latent_dim(self) -> int:
        return self.enc_w.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.enc_w.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    def clone(self, trainable: bool = False) -> "ClassAutoEncoder":
        return ClassAutoEncoder(*(_frozen(p, trainable) for p in self.parameters()), self.decoder_activation)

    def encode(self, h: Tensor) -> Tensor:
        return ops.tanh(ops.add_bias(ops.matmul(h, ops.transpose(self.enc_w)), self.enc_b))

    def decode(self, z: Tensor) -> Tensor:
        out = ops.add_bias(ops.matmul(z, ops.transpose(self.dec_w)), self.dec_b)
        return ops.tanh(out) if self.decoder_activation == "tanh" else out


@dataclass
class AutoEncoderBank:
    feature_dim: int
    latent_dim: int = 32
    decoder_activation: str = "tanh"
    error_norm: str = "l2"
    autoencoders: list[ClassAutoEncoder] = field(default_factory=list)

    def __post_init__(self):
        if self.decoder_activation not in DECODER_ACTIVATIONS:
            raise ValueError(f"decoder_activation must be one of {DECODER_ACTIVATIONS}")
        if self.error_norm not in ERROR_NORMS:
            raise ValueError(f"error_norm must be one of {ERROR_NORMS}")
        if not 0 < self.latent_dim < self.feature_dim:
            raise ValueError(f"need 0 < latent_dim < feature_dim, got {self.latent_dim} and {self.feature_dim}")

    def __len__(self) -> int:
        return len(self.autoencoders)

    @property
    def num_classes(self) -> int:
        return len(self.autoencoders)

    def parameters(self) -> list[Tensor]:
        return [p for ae in self.autoencoders for p in ae.parameters()]

    def named_parameters(self) -> dict[str, Tensor]:
        named = {}
        for c, ae in enumerate(self.autoencoders):
            for key, p in zip(("enc_w", "enc_b", "dec_w", "dec_b"), ae.parameters()):
                named[f"ae/{c}/{key}"] = p
        return named

    def clone(self, trainable: bool = False) -> "AutoEncoderBank":
        return AutoEncoderBank(
            self.feature_dim,
            self.latent_dim,
            self.decoder_activation,
            self.error_norm,
            [ae.clone(trainable) for ae in self.autoencoders],
        )

    def forward(self, h: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Reconstruction errors (n, C) and the latent codes in every subspace."""
        if not self.autoencoders:
            raise ValueError("reconstruction_errors: the auto-encoder bank is empty")
        h = _as_tensor(h)
        if h.ndim != 2 or h.shape[1] != self.feature_dim:
            raise ValueError(f"bank expects features of shape (n, {self.feature_dim}), got {h.shape}")
        cols, latents = [], []
        for ae in self.autoencoders:
            z = ae.encode(h)
            diff = ops.sub(ae.decode(z), h)
            sq = ops.sq_norm(diff, axis=1)
            err = sq if self.error_norm == "sq_l2" else ops.sqrt(sq)
            cols.append(ops.reshape(err, (-1, 1)))
            latents.append(z)
        return ops.concatenate(cols, axis=1), latents


def reconstruct(ae: ClassAutoEncoder, h) -> Tensor:
    h = _as_tensor(h)
    single = h.ndim == 1
    if single:
        h = ops.reshape(h, (1, -1))
    if h.shape[1] != ae.feature_dim:
        raise ValueError(f"reconstruct: feature length {h.shape[1]}, auto-encoder expects {ae.feature_dim}")
    out = ae.decode(ae.encode(h))
    return ops.reshape(out, (ae.feature_dim,)) if single else out


def reconstruction_errors(bank: AutoEncoderBank, h) -> Tensor:
    return bank.forward(h)[0]


def predict_proba(eps, alpha: float):
    """Softmax over -alpha * errors, row-wise.  Arrays in, arrays out."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if isinstance(eps, Tensor):
        return ops.softmax(ops.scale(eps, -alpha), axis=-1)
    eps = np.asarray(eps, dtype=np.float64)
    if not np.all(np.isfinite(eps)):
        raise ValueError("predict_proba: non-finite reconstruction errors")
    logits = -alpha * eps
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def classify_errors(eps) -> np.ndarray:
    """argmin over each row; ``np.argmin`` returns the lowest index on ties."""
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    return np.argmin(eps, axis=-1)


def classify(bank: AutoEncoderBank, h, alpha: float = 0.1) -> np.ndarray:
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    with ops.no_grad():
        eps = reconstruction_errors(bank, h)
    return classify_errors(eps)


def latent_codes(bank: AutoEncoderBank, h, class_id: int) -> Tensor:
    if not 0 <= class_id < bank.num_classes:
        raise IndexError(f"class_id {class_id} outside 0..{bank.num_classes - 1}")
    return bank.autoencoders[class_id].encode(_as_tensor(h))


def append_classes(bank: AutoEncoderBank, n_new: int, seed: int) -> AutoEncoderBank:
    """Append ``n_new`` freshly initialised auto-encoders in place and return the bank."""
    if n_new < 1:
        raise ValueError(f"n_new must be >= 1, got {n_new}")
    d, l = bank.feature_dim, bank.latent_dim
    for _ in range(n_new):
        rng = np.random.default_rng([seed, len(bank.autoencoders)])
        bank.autoencoders.append(
            ClassAutoEncoder(
                _uniform(rng, l, d),
                Tensor(np.zeros(l), requires_grad=True),
                _uniform(rng, d, l),
                Tensor(np.zeros(d), requires_grad=True),
                bank.decoder_activation,
            )
        )
    return bank


# -- linear head (prototype baseline training) -----------------------------------


@dataclass
class LinearHead:
    """Growing softmax classifier used to train the backbone of the NME baseline."""

    feature_dim: int
    weight: Tensor | None = None  # (C, d)
    bias: Tensor | None = None  # (C,)

    @property
    def num_classes(self) -> int:
        return 0 if self.weight is None else self.weight.shape[0]

    def __len__(self) -> int:
        return self.num_classes

    def parameters(self) -> list[Tensor]:
        return [] if self.weight is None else [self.weight, self.bias]

    def named_parameters(self) -> dict[str, Tensor]:
        return {} if self.weight is None else {"head/w": self.weight, "head/b": self.bias}

    def clone(self, trainable: bool = False) -> "LinearHead":
        if self.weight is None:
            return LinearHead(self.feature_dim)
        return LinearHead(self.feature_dim, _frozen(self.weight, trainable), _frozen(self.bias, trainable))

    def append_classes(self, n_new: int, seed: int) -> None:
        rng = np.random.default_rng([seed, self.num_classes, 0x11])
        fresh = _uniform(rng, n_new, self.feature_dim).data
        if self.weight is None:
            self.weight = Tensor(fresh, requires_grad=True)
            self.bias = Tensor(np.zeros(n_new), requires_grad=True)
        else:
            self.weight = Tensor(np.concatenate([self.weight.data, fresh]), requires_grad=True)
            self.bias = Tensor(np.concatenate([self.bias.data, np.zeros(n_new)]), requires_grad=True)

    def logits(self, h: Tensor) -> Tensor:
        return ops.add_bias(ops.matmul(h, ops.transpose(self.weight)), self.bias)


# -- parameter counting ------------------------------------------------------------


class ParamCount(NamedTuple):
    backbone: int
    head: int
    total: int
    head_no_bias: int
    total_no_bias: int


def head_param_count(num_classes: int, feature_dim: int, latent_dim: int, biases: bool = True) -> int:
    d, l = feature_dim, latent_dim
    per_class = l * d + l + d * l + d if biases else 2 * l * d
    return num_classes * per_class


def param_count(extractor: FeatureExtractor | None, bank: AutoEncoderBank | LinearHead, backbone: int | None = None) -> ParamCount:
    """Backbone, head and total parameter counts.

    ``backbone`` overrides the extractor's own count (e.g. to plug in a
    published backbone size).
    """
    if backbone is None:
        backbone = 0 if extractor is None else sum(p.size for p in extractor.parameters())
    if isinstance(bank, LinearHead):
        head = sum(p.size for p in bank.parameters())
        head_nb = 0 if bank.weight is None else bank.weight.size
    else:
        head = head_param_count(bank.num_classes, bank.feature_dim, bank.latent_dim, True)
        head_nb = head_param_count(bank.num_classes, bank.feature_dim, bank.latent_dim, False)
    return ParamCount(int(backbone), int(head), int(backbone + head), int(head_nb), int(backbone + head_nb))
