"""Answerable models: toy image encoder, question encoder, hybrid-convolution
fusion, attention or average pooling, classifier, and activation-map export.

Fusion kinds:
  qghc          encoder -> hybrid stack -> pool -> MLP
  qghc+concat   same, with the question feature concatenated before the MLP
  concat        encoder -> pool, concatenated with the question feature (no stack)
  blind         question feature alone (the image is never touched)
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import data as synth
from .autodiff import Node, Parameter, concat, leaf, no_grad, relu, reshape
from .hybrid import QGHCConfig, QGHCStack, make_variant
from .nn import (BatchNorm2d, Conv2d, Embedding, GRU, Linear,
                 add_channel_bias_map, batch_norm, global_avg_pool,
                 softmax_lastaxis, weighted_spatial_sum)
from .tensor import Rng, ShapeError, Tensor

FUSIONS = ("qghc", "qghc+concat", "concat", "blind")
HEADS = ("gap", "attention")


@dataclass(frozen=True)
class ModelConfig:
    """Everything needed to rebuild a model; defaults are the desk-scale
    reference configuration used by the training gate."""

    vocab_words: tuple[str, ...] = synth.WORDS
    answer_words: tuple[str, ...] = synth.ANSWERS
    image_size: int = 32
    embed_dim: int = 32
    gru_hidden: int = 64
    encoder_channels: tuple[int, int] = (16, 32)
    channels: int = 64
    groups: int = 4
    dynamic_groups: int = 1
    predictor_hidden: int = 96
    modules: int = 3
    variant: str = "hybrid"
    head: str = "gap"
    fusion: str = "qghc"
    dtype: str = "f32"

    def __post_init__(self):
        if len(self.answer_words) < 2:
            raise ValueError("need at least 2 answers")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion {self.fusion!r} not in {FUSIONS}")
        if self.head not in HEADS:
            raise ValueError(f"head {self.head!r} not in {HEADS}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype {self.dtype!r} not in ('f32', 'f64')")
        if self.image_size % 4:
            raise ValueError("image size must be divisible by 4 (two stride-2 stages)")

    @property
    def vocab_size(self) -> int:
        return len(self.vocab_words)

    @property
    def num_answers(self) -> int:
        return len(self.answer_words)

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "f64" else np.float32

    def qghc_config(self) -> QGHCConfig:
        return QGHCConfig(c_in=self.channels, c_out=self.channels,
                          groups=self.groups, dynamic_groups=self.dynamic_groups,
                          question_dim=self.gru_hidden,
                          predictor_hidden=self.predictor_hidden,
                          modules=self.modules)

    def feature_dim(self) -> int:
        if self.fusion == "blind":
            return self.gru_hidden
        if self.fusion == "concat":
            return self.channels + self.gru_hidden
        if self.fusion == "qghc+concat":
            return self.channels + self.gru_hidden
        return self.channels


class ImageEncoder:
    """Two stride-2 3x3 conv+BN+ReLU blocks and one stride-1 block: a 32x32
    image becomes an 8x8 feature grid at the stack's input width."""

    def __init__(self, name: str, widths: tuple[int, int], c_out: int, rng: Rng,
                 dtype=np.float32):
        w1, w2 = widths
        self.conv1 = Conv2d(f"{name}.conv1", 3, w1, 3, stride=2, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm2d(f"{name}.bn1", w1, dtype)
        self.conv2 = Conv2d(f"{name}.conv2", w1, w2, 3, stride=2, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm2d(f"{name}.bn2", w2, dtype)
        self.conv3 = Conv2d(f"{name}.conv3", w2, c_out, 3, stride=1, rng=rng, dtype=dtype)
        self.bn3 = BatchNorm2d(f"{name}.bn3", c_out, dtype)

    def parameters(self):
        return (self.conv1.parameters() + self.bn1.parameters()
                + self.conv2.parameters() + self.bn2.parameters()
                + self.conv3.parameters() + self.bn3.parameters())

    def named_state(self):
        return self.bn1.named_state() + self.bn2.named_state() + self.bn3.named_state()

    def forward(self, images: Node, train: bool) -> Node:
        _, _, h, w = images.shape
        if h % 4 or w % 4:
            raise ShapeError(f"image spatial size {h}x{w} not divisible by 4")
        out = relu(batch_norm(self.conv1.forward(images), self.bn1, train))
        out = relu(batch_norm(self.conv2.forward(out), self.bn2, train))
        return relu(batch_norm(self.conv3.forward(out), self.bn3, train))


class AttentionHead:
    """1x1 score convolution over features enriched with the projected
    question, followed by a spatial softmax."""

    def __init__(self, name: str, channels: int, question_dim: int, rng: Rng,
                 dtype=np.float32):
        self.score_conv = Conv2d(f"{name}.score_conv", channels, 1, 1, rng=rng, dtype=dtype)
        self.proj = Linear(f"{name}.proj", question_dim, channels, rng, dtype)

    def parameters(self):
        return self.score_conv.parameters() + self.proj.parameters()

    def named_state(self):
        return []


def attention_pool(f: Node, f_q: Node, head: AttentionHead) -> Node:
    """Weighted spatial summation: the question is added first (projected to
    channel space), then scored; weights are a softmax over all locations."""
    b, c, h, w = f.shape
    enriched = add_channel_bias_map(f, head.proj.forward(f_q))
    scores = reshape(head.score_conv.forward(enriched), (b, h * w))
    weights = softmax_lastaxis(scores)
    return weighted_spatial_sum(reshape(enriched, (b, c, h * w)), weights)


@dataclass
class AnswerDistribution:
    logits: Tensor
    probabilities: Tensor

    def predictions(self) -> np.ndarray:
        return np.argmax(self.logits.array, axis=1)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class VQAModel:
    """Built from a ModelConfig and an init seed; parameters enumerate in a
    fixed construction order (the checkpoint contract relies on it)."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        rng = Rng(seed).derive(2)
        dtype = config.np_dtype
        dq = config.gru_hidden

        self.embedding = Embedding("question.embed", config.vocab_size,
                                   config.embed_dim, rng, dtype)
        self.gru = GRU("question.gru", config.embed_dim, dq, rng, dtype)
        self.encoder = None
        self.stack: QGHCStack | None = None
        self.attention = None
        if config.fusion != "blind":
            self.encoder = ImageEncoder("encoder", config.encoder_channels,
                                        config.channels, rng, dtype)
        if config.fusion in ("qghc", "qghc+concat"):
            self.stack = make_variant(config.variant, config.qghc_config(),
                                      "stack", rng, dtype)
        if config.head == "attention" and config.fusion != "blind":
            self.attention = AttentionHead("head", config.channels, dq, rng, dtype)

        hidden = 2 * config.num_answers
        self.fc1 = Linear("classifier.fc1", config.feature_dim(), hidden, rng, dtype)
        self.fc2 = Linear("classifier.fc2", hidden, config.num_answers, rng, dtype,
                          zero_init=True)

    # -- parameter / state walking ------------------------------------------

    def parameters(self) -> list[Parameter]:
        params = self.embedding.parameters() + self.gru.parameters()
        if self.encoder is not None:
            params += self.encoder.parameters()
        if self.stack is not None:
            params += self.stack.parameters()
        if self.attention is not None:
            params += self.attention.parameters()
        return params + self.fc1.parameters() + self.fc2.parameters()

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = [(p.name, p) for p in self.parameters()]
        names = [n for n, _ in out]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names")
        return out

    def named_state(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for part in (self.encoder, self.stack):
            if part is not None:
                out += part.named_state()
        return out

    # -- forward paths --------------------------------------------------------

    def question_feature(self, tokens: np.ndarray) -> Node:
        return self.gru.encode(self.embedding.forward(np.asarray(tokens)))

    def forward(self, images: np.ndarray, tokens: np.ndarray, train: bool,
                return_features: bool = False):
        """Logits node for a batch; optionally also the pre-pool feature map."""
        f_q = self.question_feature(tokens)
        fusion = self.config.fusion
        fmap = None
        if fusion == "blind":
            feats = f_q
        else:
            x = leaf(Tensor(np.ascontiguousarray(images, dtype=self.config.np_dtype)),
                     requires_grad=False)
            fmap = self.encoder.forward(x, train)
            if self.stack is not None:
                fmap = self.stack.forward(fmap, f_q, train)
            if self.attention is not None:
                pooled = attention_pool(fmap, f_q, self.attention)
            else:
                pooled = global_avg_pool(fmap)
            feats = pooled if fusion == "qghc" else concat([pooled, f_q], axis=1)
        logits = self.fc2.forward(relu(self.fc1.forward(feats)))
        if return_features:
            return logits, fmap
        return logits

    def linearized_classifier_weights(self) -> np.ndarray:
        """Composition of the two classifier layers with the ReLU dropped,
        restricted to the feature-map channels: the approximate per-answer
        channel weights used for activation maps."""
        c = self.config.channels
        w1 = self.fc1.weight.node.array[:c, :]
        w2 = self.fc2.weight.node.array
        return w1 @ w2


def model_forward(images: np.ndarray, tokens: np.ndarray, model: VQAModel,
                  train: bool = False) -> AnswerDistribution:
    with no_grad():
        logits = model.forward(images, tokens, train)
    z = logits.array
    return AnswerDistribution(Tensor(z), Tensor(softmax_rows(z)))


# ---------------------------------------------------------------------------
# activation maps
# ---------------------------------------------------------------------------

def cam_map(features: np.ndarray, weights: np.ndarray, answer: int
            ) -> tuple[np.ndarray, np.ndarray]:
    """Per-location evidence for one answer: M[x,y] = sum_c w[c,a] f[c,x,y].

    Returns (raw, normalized) heatmaps of shape (B,H,W); the normalized map
    is min-max scaled to [0,1] per image (a constant map normalizes to 0).
    """
    if features.ndim != 4:
        raise ShapeError(f"features must be (B,C,H,W), got {features.shape}")
    b, c, h, w = features.shape
    if weights.shape[0] != c:
        raise ShapeError(f"weights rows {weights.shape[0]} != channels {c}")
    if not 0 <= answer < weights.shape[1]:
        raise IndexError(f"answer index {answer} out of range [0, {weights.shape[1]})")
    raw = np.einsum("c,bchw->bhw", weights[:, answer], features)
    lo = raw.min(axis=(1, 2), keepdims=True)
    hi = raw.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    normalized = np.where(span > 0, (raw - lo) / safe, 0.0)
    return raw, normalized


def model_cam(model: VQAModel, images: np.ndarray, tokens: np.ndarray,
              answer: int) -> tuple[np.ndarray, np.ndarray]:
    """Activation maps from the final feature maps and the linearized
    classifier (eval mode)."""
    if model.config.fusion == "blind":
        raise ValueError("blind models have no feature map to visualize")
    with no_grad():
        _, fmap = model.forward(images, tokens, train=False, return_features=True)
    return cam_map(fmap.array, model.linearized_classifier_weights(), answer)


def upsample_nearest(heatmap: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(heatmap, factor, axis=-2), factor, axis=-1)


def write_pgm(path, gray: np.ndarray) -> None:
    """8-bit binary PGM ("P5"); ``gray`` is (H,W) float in [0,1] or uint8."""
    if gray.dtype != np.uint8:
        gray = np.clip(np.rint(gray * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


CAM_CSV_FIELDS = ("sample_id", "question", "predicted", "answer",
                  "argmax_row", "argmax_col")


def append_cam_csv(path, row: dict) -> None:
    """CSV sidecar: one row per exported heatmap (header written once)."""
    exists = path.exists() if hasattr(path, "exists") else False
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CAM_CSV_FIELDS)
        if not exists or fh.tell() == 0:
            writer.writeheader()
        writer.writerow(row)
