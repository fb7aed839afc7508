"""The three networks: a generator scoring each token for selection, a
student classifier exposing its internal feature map, and a teacher
classifier with the same structure but independent weights.

All encoders are embedding + one hidden sigmoid layer. The classifier pools
token states over the sequence (mean or max, honoring the padding mask),
then a sigmoid feature head keeps features in [0, 1] for moment matching,
and a softmax output head produces class probabilities. The generator
scores tokens independently, which is deliberately minimal; anything
mapping tokens to probabilities in [0, 1] can replace it behind the same
forward signature.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch, Example, PAD_ID, make_batch


@dataclass
class ModelConfig:
    vocab_size: int
    num_classes: int = 2
    embed_dim: int = 50
    hidden_dim: int = 64
    feature_dim: int = 100
    pooling: str = "max"  # or "mean"
    class_conditioning: bool = False
    share_embeddings: bool = False
    # the generator head bias starts at logit(initial_selection_prob), so
    # training begins with dense masks and the regularizer prunes from there;
    # starting sparse instead tends to starve the classifier of signal
    initial_selection_prob: float = 0.8

    def __post_init__(self):
        if self.pooling not in ("mean", "max"):
            raise ValueError(f"unknown pooling {self.pooling!r}")
        if self.vocab_size < 2 or self.num_classes < 2:
            raise ValueError("need vocab_size >= 2 and num_classes >= 2")
        if not 0.0 < self.initial_selection_prob < 1.0:
            raise ValueError("initial_selection_prob must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class EmbeddingTable:
    """Token embedding matrix; row 0 is the padding row, pinned at zero."""

    def __init__(self, weights: Tensor):
        weights.data[PAD_ID] = 0.0
        self.weights = weights

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        w = rng.normal(scale=0.1, size=(vocab_size, dim))
        return cls(Tensor(w, requires_grad=True))

    def freeze_padding_grad(self) -> None:
        if self.weights.grad is not None:
            self.weights.grad[PAD_ID] = 0.0


@dataclass
class GeneratorParams:
    embedding: EmbeddingTable
    w_enc: Tensor
    b_enc: Tensor
    w_head: Tensor  # hidden -> 1 per-token score
    b_head: Tensor
    num_classes: int
    class_conditioning: bool

    def named(self) -> dict[str, Tensor]:
        return {"embedding": self.embedding.weights, "w_enc": self.w_enc,
                "b_enc": self.b_enc, "w_head": self.w_head, "b_head": self.b_head}


@dataclass
class ClassifierParams:
    embedding: EmbeddingTable
    w_enc: Tensor
    b_enc: Tensor
    w_feat: Tensor
    b_feat: Tensor
    w_out: Tensor
    b_out: Tensor
    pooling: str

    def named(self) -> dict[str, Tensor]:
        return {"embedding": self.embedding.weights, "w_enc": self.w_enc,
                "b_enc": self.b_enc, "w_feat": self.w_feat, "b_feat": self.b_feat,
                "w_out": self.w_out, "b_out": self.b_out}


# teacher shares the classifier structure, only the weights are its own
TeacherParams = ClassifierParams


@dataclass
class Models:
    generator: GeneratorParams | None = None
    classifier: ClassifierParams | None = None
    teacher: TeacherParams | None = None


def init_generator(cfg: ModelConfig, rng: np.random.Generator,
                   embedding: EmbeddingTable | None = None) -> GeneratorParams:
    emb = embedding if embedding is not None else EmbeddingTable.init(
        cfg.vocab_size, cfg.embed_dim, rng)
    in_dim = cfg.embed_dim + (cfg.num_classes if cfg.class_conditioning else 0)
    p0 = cfg.initial_selection_prob
    return GeneratorParams(
        embedding=emb,
        w_enc=Tensor(rng.normal(scale=0.2, size=(in_dim, cfg.hidden_dim)), requires_grad=True),
        b_enc=Tensor(np.zeros(cfg.hidden_dim), requires_grad=True),
        w_head=Tensor(np.zeros((cfg.hidden_dim, 1)), requires_grad=True),
        b_head=Tensor(np.full(1, np.log(p0 / (1.0 - p0))), requires_grad=True),
        num_classes=cfg.num_classes,
        class_conditioning=cfg.class_conditioning,
    )


def init_classifier(cfg: ModelConfig, rng: np.random.Generator,
                    embedding: EmbeddingTable | None = None) -> ClassifierParams:
    emb = embedding if embedding is not None else EmbeddingTable.init(
        cfg.vocab_size, cfg.embed_dim, rng)
    return ClassifierParams(
        embedding=emb,
        w_enc=Tensor(rng.normal(scale=0.2, size=(cfg.embed_dim, cfg.hidden_dim)),
                     requires_grad=True),
        b_enc=Tensor(np.zeros(cfg.hidden_dim), requires_grad=True),
        w_feat=Tensor(rng.normal(scale=0.2, size=(cfg.hidden_dim, cfg.feature_dim)),
                      requires_grad=True),
        b_feat=Tensor(np.zeros(cfg.feature_dim), requires_grad=True),
        w_out=Tensor(rng.normal(scale=0.2, size=(cfg.feature_dim, cfg.num_classes)),
                     requires_grad=True),
        b_out=Tensor(np.zeros(cfg.num_classes), requires_grad=True),
        pooling=cfg.pooling,
    )


def init_models(cfg: ModelConfig, rng: np.random.Generator,
                with_teacher: bool = True) -> Models:
    clf = init_classifier(cfg, rng)
    gen = init_generator(cfg, rng, embedding=clf.embedding if cfg.share_embeddings else None)
    teacher = init_classifier(cfg, rng) if with_teacher else None
    return Models(generator=gen, classifier=clf, teacher=teacher)


# ---------------------------------------------------------------------------
# forward passes (batched; single examples go through batch_of)


def batch_of(example: Example) -> Batch:
    return make_batch([example], [0])


def embed(tokens: np.ndarray, table: EmbeddingTable) -> Tensor:
    """Look up embeddings for a (N, L) id matrix; padding rows come out zero."""
    return ad.gather(table.weights, tokens)


def _label_onehot(labels: np.ndarray, num_classes: int, length: int) -> Tensor:
    onehot = np.zeros((len(labels), num_classes))
    onehot[np.arange(len(labels)), labels] = 1.0
    per_token = np.repeat(onehot[:, None, :], length, axis=1)
    return Tensor(per_token)


def generator_forward(batch: Batch, params: GeneratorParams, *,
                      labels: np.ndarray | None = None,
                      stochastic: bool = False,
                      threshold: float = 0.5,
                      rng: np.random.Generator | None = None,
                      ) -> tuple[Tensor, Tensor]:
    """Score each token and binarize. Returns (probabilities p, mask z).

    With class conditioning, a one-hot of ``labels`` is concatenated to every
    token embedding, so the same text can yield class-specific rationales.
    Padding positions are forced to z = 0 and receive no gradient.
    """
    emb = embed(batch.tokens, params.embedding)
    if params.class_conditioning:
        if labels is None:
            raise ValueError("generator is class-conditioned but no labels were given")
        emb = ad.concat([emb, _label_onehot(labels, params.num_classes,
                                            batch.tokens.shape[1])], axis=-1)
    h = ad.sigmoid(ad.matmul(emb, params.w_enc) + params.b_enc)
    scores = ad.reshape(ad.matmul(h, params.w_head) + params.b_head,
                        batch.tokens.shape)
    p = ad.sigmoid(scores)
    z = ad.straight_through_binarize(p, threshold, stochastic=stochastic, rng=rng)
    z = ad.mul(z, Tensor(batch.valid))
    return p, z


def classifier_forward(batch: Batch, z, params: ClassifierParams,
                       ) -> tuple[Tensor, Tensor]:
    """Classify from masked embeddings; returns (feature in [0,1]^d_f, probs).

    ``z`` may be a mask Tensor on the tape or a plain array; all-ones gives
    the full-text path used for feature matching and by the teacher.
    """
    z = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if z.shape != batch.tokens.shape:
        raise ad.ShapeError("classifier_forward", z.shape, batch.tokens.shape)
    emb = embed(batch.tokens, params.embedding)
    masked = ad.mul(emb, ad.reshape(z, z.shape + (1,)))
    h = ad.sigmoid(ad.matmul(masked, params.w_enc) + params.b_enc)
    pool = ad.max_pool if params.pooling == "max" else ad.mean_pool
    pooled = pool(h, batch.valid)
    feature = ad.sigmoid(ad.matmul(pooled, params.w_feat) + params.b_feat)
    probs = ad.softmax(ad.matmul(feature, params.w_out) + params.b_out)
    return feature, probs


def teacher_forward(batch: Batch, params: TeacherParams) -> Tensor:
    """Full-text class distribution from the teacher (mask implicitly all-ones)."""
    _, probs = classifier_forward(batch, np.ones_like(batch.valid), params)
    return probs


def teacher_predicted_labels(batch: Batch, params: TeacherParams) -> np.ndarray:
    with ad.no_grad():
        probs = teacher_forward(batch, params)
    return probs.data.argmax(axis=-1)


# ---------------------------------------------------------------------------
# checkpoints: text header (name, shape, offset) + little-endian float64 payload

_MAGIC = "f64-params 1"


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    payload = bytearray()
    for name, arr in arrays.items():
        if " " in name:
            raise ValueError(f"parameter name {name!r} must not contain spaces")
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append((name, a.shape, len(payload)))
        payload.extend(a.tobytes())
    header = [_MAGIC, str(len(entries))]
    for name, shape, offset in entries:
        dims = ",".join(str(d) for d in shape)
        header.append(f"{name} {dims} {offset}")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("utf-8"))
        f.write(bytes(payload))


def load_arrays(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    lines = []
    pos = 0
    first = blob.index(b"\n")
    if blob[:first].decode("utf-8") != _MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    pos = first + 1
    end = blob.index(b"\n", pos)
    count = int(blob[pos:end])
    pos = end + 1
    for _ in range(count):
        end = blob.index(b"\n", pos)
        lines.append(blob[pos:end].decode("utf-8"))
        pos = end + 1
    arrays: dict[str, np.ndarray] = {}
    for line in lines:
        name, dims, offset = line.split(" ")
        shape = tuple(int(d) for d in dims.split(","))
        n = int(np.prod(shape))
        start = pos + int(offset)
        flat = np.frombuffer(blob, dtype="<f8", count=n, offset=start)
        arrays[name] = flat.reshape(shape).astype(np.float64)
    return arrays


def save_generator(path: str | Path, params: GeneratorParams) -> None:
    save_arrays(path, {k: v.data for k, v in params.named().items()})


def save_classifier(path: str | Path, params: ClassifierParams) -> None:
    save_arrays(path, {k: v.data for k, v in params.named().items()})


def load_generator(path: str | Path, cfg: ModelConfig) -> GeneratorParams:
    arrays = load_arrays(path)
    return GeneratorParams(
        embedding=EmbeddingTable(Tensor(arrays["embedding"], requires_grad=True)),
        w_enc=Tensor(arrays["w_enc"], requires_grad=True),
        b_enc=Tensor(arrays["b_enc"], requires_grad=True),
        w_head=Tensor(arrays["w_head"], requires_grad=True),
        b_head=Tensor(arrays["b_head"], requires_grad=True),
        num_classes=cfg.num_classes,
        class_conditioning=cfg.class_conditioning,
    )


def load_classifier(path: str | Path, cfg: ModelConfig) -> ClassifierParams:
    arrays = load_arrays(path)
    return ClassifierParams(
        embedding=EmbeddingTable(Tensor(arrays["embedding"], requires_grad=True)),
        w_enc=Tensor(arrays["w_enc"], requires_grad=True),
        b_enc=Tensor(arrays["b_enc"], requires_grad=True),
        w_feat=Tensor(arrays["w_feat"], requires_grad=True),
        b_feat=Tensor(arrays["b_feat"], requires_grad=True),
        w_out=Tensor(arrays["w_out"], requires_grad=True),
        b_out=Tensor(arrays["b_out"], requires_grad=True),
        pooling=cfg.pooling,
    )
