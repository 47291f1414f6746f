"""Encoder, projection heads, classifier, and the bundle that holds them."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Rng, Tensor

COMPONENTS = ("encoder", "f_hom", "f_het", "f_aux", "classifier")
HEADS = ("f_hom", "f_het", "f_aux")


@dataclass
class EncoderConfig:
    input_size: int = 32
    channels: tuple = (16, 32, 64, 128)
    embed_dim: int = 128
    proj_dim: int = 128
    kernel: int = 3

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels:
            raise ContractError("encoder needs at least one conv block")
        if self.input_size % (2 ** len(self.channels)):
            raise ContractError(
                f"input_size {self.input_size} not divisible by 2^{len(self.channels)}"
            )
        if self.embed_dim != self.channels[-1]:
            raise ContractError("embed_dim must equal the last channel count")

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


@dataclass
class ModelBundle:
    """Encoder plus the three projection heads and the classifier.

    ``params`` maps dotted names (``encoder.conv0.w``, ``f_hom.w1`` ...) to
    tensors; the prefix before the first dot is the component.
    """

    config: EncoderConfig
    params: dict
    frozen: dict = field(default_factory=lambda: {c: False for c in COMPONENTS})

    @classmethod
    def initialize(cls, config=None, rng=None, dtype=np.float32):
        """He-uniform weights, zero biases. Each component gets its own substream."""
        config = config or EncoderConfig()
        rng = rng or Rng(0)
        params = {}
        k = config.kernel
        cin = 3
        enc_rng = rng.substream(0)
        for i, cout in enumerate(config.channels):
            fan_in = cin * k * k
            params[f"encoder.conv{i}.w"] = T.he_uniform((cout, cin, k, k), fan_in, enc_rng, dtype)
            params[f"encoder.conv{i}.b"] = np.zeros(cout, dtype=dtype)
            cin = cout
        d, c = config.embed_dim, config.proj_dim
        for j, head in enumerate(HEADS, start=1):
            hrng = rng.substream(j)
            params[f"{head}.w1"] = T.he_uniform((d, d), d, hrng, dtype)
            params[f"{head}.b1"] = np.zeros(d, dtype=dtype)
            params[f"{head}.w2"] = T.he_uniform((d, c), d, hrng, dtype)
            params[f"{head}.b2"] = np.zeros(c, dtype=dtype)
        params["classifier.w"] = T.he_uniform((d, 1), d, rng.substream(4), dtype)
        params["classifier.b"] = np.zeros(1, dtype=dtype)
        tensors = {name: Tensor(arr, requires_grad=True, name=name) for name, arr in params.items()}
        return cls(config, tensors)

    # ------------------------------------------------------------ params

    def parameters(self, component=None):
        if component is None:
            return list(self.params.items())
        prefix = component + "."
        return [(n, t) for n, t in self.params.items() if n.startswith(prefix)]

    def trainable_parameters(self):
        return [(n, t) for n, t in self.params.items() if not self.frozen[n.split(".", 1)[0]]]

    def set_frozen(self, **flags):
        for comp, value in flags.items():
            if comp not in self.frozen:
                raise KeyError(comp)
            self.frozen[comp] = bool(value)

    def configure_stage(self, stage):
        """Stage 1 trains encoder + hom/het heads; stage 2 only f_aux + classifier."""
        if stage == 1:
            self.frozen = {"encoder": False, "f_hom": False, "f_het": False, "f_aux": True, "classifier": True}
        elif stage == 2:
            self.frozen = {"encoder": True, "f_hom": True, "f_het": True, "f_aux": False, "classifier": False}
        else:
            raise ValueError(f"unknown stage {stage}")

    def snapshot(self):
        return {n: t.data.copy() for n, t in self.params.items()}

    # ----------------------------------------------------------- forward

    def encode(self, x):
        """B×3×S×S images -> B×embed_dim embeddings."""
        x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x))
        S = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != S or x.shape[3] != S:
            raise DimensionError(f"encoder expects B×3×{S}×{S}, got {x.shape}")
        h = x
        for i, cout in enumerate(self.config.channels):
            w = self.params[f"encoder.conv{i}.w"]
            b = self.params[f"encoder.conv{i}.b"]
            h = T.conv2d(h, w, stride=2, pad=self.config.kernel // 2)
            h = T.relu(T.add(h, T.reshape(b, (1, cout, 1, 1))))
        return T.global_mean_pool(h)

    def _project(self, head, e):
        if e.ndim != 2 or e.shape[1] != self.config.embed_dim:
            raise DimensionError(f"{head} expects B×{self.config.embed_dim}, got {e.shape}")
        p = self.params
        h = T.relu(T.add(T.matmul(e, p[f"{head}.w1"]), p[f"{head}.b1"]))
        z = T.add(T.matmul(h, p[f"{head}.w2"]), p[f"{head}.b2"])
        return T.l2_normalize(z)

    def project_hom(self, e):
        return self._project("f_hom", e)

    def project_het(self, e):
        return self._project("f_het", e)

    def project_aux(self, e):
        return self._project("f_aux", e)

    def classify(self, e):
        """Fake-class logit per row (sigmoid gives the probability of fake)."""
        if e.ndim != 2 or e.shape[1] != self.config.embed_dim:
            raise DimensionError(f"classifier expects B×{self.config.embed_dim}, got {e.shape}")
        return T.add(T.matmul(e, self.params["classifier.w"]), self.params["classifier.b"])

    def score(self, x, batch_size=256):
        """Probability of fake for a stack of images, computed without a tape."""
        x = np.asarray(x)
        out = []
        for start in range(0, len(x), batch_size):
            chunk = x[start : start + batch_size].astype(self.dtype, copy=False)
            logit = self.classify(self.encode(chunk)).data[:, 0]
            out.append(T.sigmoid(Tensor._wrap(logit.astype(np.float64))).data)
        return np.concatenate(out) if out else np.zeros(0)

    @property
    def dtype(self):
        return self.params["classifier.w"].dtype
