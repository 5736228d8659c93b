"""Audio-visual segmentation network.

Pipeline: convolutional feature pyramid -> multi-scale transformer encoder
(which also builds the dense 1/4-scale mask feature) -> audio-conditioned
query generator -> audio-visual mixer -> cross-modal transformer decoder ->
mask head producing per-class logits plus an auxiliary foreground head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor

MIXER_VARIANTS = ("CHA", "CRA", "NONE")


@dataclass
class ModelConfig:
    d: int = 64                      # embedding dimension
    n_head: int = 8
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_query: int = 8
    n_class: int = 1                 # 1 = binary, >=2 = semantic
    height: int = 64
    width: int = 64
    frames: int = 5                  # frames per clip
    use_learnable_queries: bool = True
    mixer_variant: str = "CHA"
    lambda_mix: float = 0.1

    def validate(self) -> None:
        if self.d % self.n_head:
            raise ConfigError(f"d={self.d} must be divisible by n_head={self.n_head}")
        if self.d % 4:
            raise ConfigError(f"d={self.d} must be divisible by 4 (2-D sinusoids)")
        if self.n_query < 1 or self.n_class < 1:
            raise ConfigError("n_query and n_class must be >= 1")
        if self.height % 32 or self.width % 32:
            raise ConfigError(
                f"height={self.height}, width={self.width} must be divisible by 32"
            )
        if self.frames < 1:
            raise ConfigError("frames must be >= 1")
        if self.mixer_variant not in MIXER_VARIANTS:
            raise ConfigError(
                f"mixer_variant={self.mixer_variant!r} not in {MIXER_VARIANTS}"
            )
        if self.lambda_mix < 0:
            raise ConfigError("lambda_mix must be >= 0")


@dataclass
class FeaturePyramid:
    """Per-frame visual features at 1/4, 1/8, 1/16, 1/32 scale, D channels."""

    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor

    def levels(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.f1, self.f2, self.f3, self.f4


@dataclass
class QuerySet:
    q_init: Tensor
    q_learn: Optional[Tensor]
    q_audio: Tensor
    q_mixed: Tensor
    q_output: Optional[Tensor] = None


@dataclass
class MaskBundle:
    f_mask: Tensor                  # (T, D, h, w)
    f_mixed: Tensor                 # (T, D, h, w)
    omega: Optional[Tensor]         # (T, D) channel weights, CHA only
    aux_logits: Tensor              # (T, 1, h, w)
    logits: Tensor                  # (T, n_class, h, w)


class FeatureStub(nn.Module):
    """Small trainable pyramid standing in for a pretrained backbone.

    A 4x4/stride-4 patch conv, then three stride-2 convs; each level gets a
    1x1 projection to the shared embedding width.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.stem = nn.Conv2d(3, d, kernel_size=4, stride=4, rng=rng)
        self.down2 = nn.Conv2d(d, d, kernel_size=3, stride=2, rng=rng)
        self.down3 = nn.Conv2d(d, d, kernel_size=3, stride=2, rng=rng)
        self.down4 = nn.Conv2d(d, d, kernel_size=3, stride=2, rng=rng)
        self.proj1 = nn.Conv2d(d, d, kernel_size=1, stride=1, rng=rng)
        self.proj2 = nn.Conv2d(d, d, kernel_size=1, stride=1, rng=rng)
        self.proj3 = nn.Conv2d(d, d, kernel_size=1, stride=1, rng=rng)
        self.proj4 = nn.Conv2d(d, d, kernel_size=1, stride=1, rng=rng)

    def __call__(self, frames: Tensor) -> FeaturePyramid:
        t1 = T.relu(self.stem(frames))
        t2 = T.relu(self.down2(t1))
        t3 = T.relu(self.down3(t2))
        t4 = T.relu(self.down4(t3))
        return FeaturePyramid(
            f1=self.proj1(t1), f2=self.proj2(t2), f3=self.proj3(t3), f4=self.proj4(t4)
        )


class QueryGenerator(nn.Module):
    """Expands the per-frame audio vector into audio-conditioned queries.

    With a single audio key per frame the attention weight over keys is
    identically 1, so the attention block reduces to its value path; only
    that path is materialized (a q/k pair would receive zero gradient).
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.v_proj = nn.Linear(d, d, rng)
        self.out_proj = nn.Linear(d, d, rng)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.FeedForward(d, rng)
        self.norm2 = nn.LayerNorm(d)

    def __call__(self, audio: Tensor, q_init: Tensor) -> Tensor:
        t, _, d = q_init.shape
        pooled = T.reshape(self.out_proj(self.v_proj(audio)), (t, 1, d))
        x = self.norm1(T.add(q_init, pooled))
        return self.norm2(T.add(x, self.ffn(x)))


class CrossAttentionMixer(nn.Module):
    """Cross-attention variant: spatial queries attend to the audio vector.

    One key/value per frame means every spatial position receives weight 1,
    so the module reduces to a learned projection of the audio broadcast
    over space; the output projection carries no bias so that zero audio
    with a zero value bias leaves the mask feature unchanged.
    """

    def __init__(self, d: int, rng: np.random.Generator):
        super().__init__()
        self.v_proj = nn.Linear(d, d, rng)
        self.out_proj = nn.Linear(d, d, rng, bias=False)

    def __call__(self, f_mask: Tensor, audio: Tensor) -> Tensor:
        t, d = audio.shape
        pooled = T.reshape(self.out_proj(self.v_proj(audio)), (t, d, 1, 1))
        return T.add(f_mask, pooled)


class MaskHead(nn.Module):
    """Fuses decoder queries with the mixed mask feature into mask logits."""

    def __init__(self, d: int, n_query: int, n_class: int, rng: np.random.Generator):
        super().__init__()
        self.mlp1 = nn.Linear(n_query, d, rng)
        self.mlp2 = nn.Linear(d, d, rng)
        self.fc = nn.Linear(d, n_class, rng)
        self.aux_fc = nn.Linear(d, 1, rng)

    def __call__(self, f_mixed: Tensor, q_output: Tensor) -> tuple[Tensor, Tensor]:
        t, d, h, w = f_mixed.shape
        n_class = self.fc.weight.shape[1]
        x = T.transpose(T.reshape(f_mixed, (t, d, h * w)), (0, 2, 1))  # (T, hw, D)
        affinity = T.matmul(x, T.transpose(q_output, (0, 2, 1)))       # (T, hw, Nq)
        fused = T.add(x, self.mlp2(T.relu(self.mlp1(affinity))))
        logits = T.reshape(T.transpose(self.fc(fused), (0, 2, 1)), (t, n_class, h, w))
        aux = T.reshape(T.transpose(self.aux_fc(x), (0, 2, 1)), (t, 1, h, w))
        return logits, aux


def channel_attention(
    f_mask: Tensor, audio: Tensor, n_head: int
) -> tuple[Tensor, Tensor]:
    """Audio-query channel attention over spatial positions.

    Per frame and head: scores between the audio vector and every spatial
    feature vector are softmaxed over space, and the attention-weighted sum
    of spatial vectors gives that head's slice of the channel weights.
    Returns (omega (T, D), attention weights (T, n_head, 1, h*w)).
    """
    t, d, h, w = f_mask.shape
    if audio.shape != (t, d):
        raise T.ShapeError(
            f"channel_attention: audio {audio.shape} vs mask feature {f_mask.shape}"
        )
    head_dim = d // n_head
    x = T.transpose(T.reshape(f_mask, (t, d, h * w)), (0, 2, 1))
    xh = T.transpose(T.reshape(x, (t, h * w, n_head, head_dim)), (0, 2, 1, 3))
    ah = T.reshape(audio, (t, n_head, 1, head_dim))
    scores = T.scale(T.matmul(ah, T.transpose(xh, (0, 1, 3, 2))), head_dim**-0.5)
    attn = T.softmax(scores, axis=-1)
    omega = T.reshape(T.matmul(attn, xh), (t, d))
    return omega, attn


class AudioVisualSegmenter(nn.Module):
    """Segments the objects currently producing the given audio."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        d = config.d
        self.stub = FeatureStub(d, rng)
        self.query_gen = QueryGenerator(d, rng)
        if config.use_learnable_queries:
            bound = (1.0 / d) ** 0.5
            self.q_learn = Tensor(
                rng.uniform(-bound, bound, (config.n_query, d)), requires_grad=True
            )
        else:
            self.q_learn = None
        self.level_embed = Tensor(
            rng.uniform(-(1.0 / d) ** 0.5, (1.0 / d) ** 0.5, (3, d)), requires_grad=True
        )
        self.enc_layers = nn.ModuleList(
            [nn.EncoderLayer(d, config.n_head, rng) for _ in range(config.n_enc_layers)]
        )
        self.dec_layers = nn.ModuleList(
            [nn.DecoderLayer(d, config.n_head, rng) for _ in range(config.n_dec_layers)]
        )
        if config.mixer_variant == "CRA":
            self.cra_mixer = CrossAttentionMixer(d, rng)
        self.head = MaskHead(d, config.n_query, config.n_class, rng)

        # token geometry for the encoder levels (1/8, 1/16, 1/32)
        self._level_shapes = [
            (config.height // s, config.width // s) for s in (8, 16, 32)
        ]
        self._sincos = [
            nn.sincos_2d(h, w, d) for (h, w) in self._level_shapes
        ]

    # -- stages ------------------------------------------------------------

    def feature_stub(self, frames: Tensor) -> FeaturePyramid:
        cfg = self.config
        if frames.ndim != 4 or frames.shape[1:] != (3, cfg.height, cfg.width):
            raise ConfigError(
                f"frames shape {frames.shape} does not match configured "
                f"(*, 3, {cfg.height}, {cfg.width})"
            )
        return self.stub(frames)

    def generate_queries(self, audio: Tensor) -> QuerySet:
        cfg = self.config
        if audio.ndim != 2 or audio.shape[1] != cfg.d:
            raise ConfigError(f"audio shape {audio.shape} does not match (*, {cfg.d})")
        t = audio.shape[0]
        q_init = Tensor(np.zeros((t, cfg.n_query, cfg.d)))
        q_audio = self.query_gen(audio, q_init)
        if self.q_learn is not None:
            q_mixed = T.add(q_audio, self.q_learn)
        else:
            q_mixed = q_audio
        return QuerySet(q_init=q_init, q_learn=self.q_learn, q_audio=q_audio, q_mixed=q_mixed)

    def _positional_tokens(self) -> Tensor:
        blocks = []
        for i, sincos in enumerate(self._sincos):
            lvl = T.narrow(self.level_embed, 0, i, 1)  # (1, D)
            blocks.append(T.add(Tensor(sincos), lvl))
        return T.concat(blocks, axis=0)  # (L, D)

    def _flatten_level(self, f: Tensor) -> Tensor:
        t, d, h, w = f.shape
        return T.transpose(T.reshape(f, (t, d, h * w)), (0, 2, 1))

    def encode_tokens(self, tokens: Tensor, pos: Tensor) -> Tensor:
        """Run the self-attention stack over a (T, L, D) token sequence."""
        x = tokens
        for layer in self.enc_layers:
            x = layer(x, pos)
        return x

    def encode(self, pyramid: FeaturePyramid) -> tuple[Tensor, Tensor]:
        """Encode flattened 1/8..1/32 tokens; fuse into the mask feature.

        Returns (memory tokens (T, L, D), f_mask (T, D, H/4, W/4)).
        """
        tokens = T.concat(
            [self._flatten_level(f) for f in (pyramid.f2, pyramid.f3, pyramid.f4)],
            axis=1,
        )
        memory = self.encode_tokens(tokens, self._positional_tokens())
        h2, w2 = self._level_shapes[0]
        t = memory.shape[0]
        f2_tokens = T.narrow(memory, 1, 0, h2 * w2)
        f2_map = T.reshape(
            T.transpose(f2_tokens, (0, 2, 1)), (t, self.config.d, h2, w2)
        )
        f_mask = T.add(pyramid.f1, T.upsample2x_bilinear(f2_map))
        return memory, f_mask

    def mix_cha(self, f_mask: Tensor, audio: Tensor) -> tuple[Tensor, Tensor]:
        """Channel-attention mixer: residual reweighting of mask channels."""
        t, d, _, _ = f_mask.shape
        omega, _ = channel_attention(f_mask, audio, self.config.n_head)
        f_mixed = T.add(f_mask, T.mul(f_mask, T.reshape(omega, (t, d, 1, 1))))
        return f_mixed, omega

    def mix_cra(self, f_mask: Tensor, audio: Tensor) -> tuple[Tensor, None]:
        return self.cra_mixer(f_mask, audio), None

    def mix(self, f_mask: Tensor, audio: Tensor) -> tuple[Tensor, Optional[Tensor]]:
        variant = self.config.mixer_variant
        if variant == "CHA":
            return self.mix_cha(f_mask, audio)
        if variant == "CRA":
            return self.mix_cra(f_mask, audio)
        return f_mask, None

    def decode(self, q_mixed: Tensor, memory: Tensor) -> Tensor:
        pos = self._positional_tokens() if len(self.dec_layers) else None
        x = q_mixed
        for layer in self.dec_layers:
            x = layer(x, memory, pos)
        return x

    def mask_head(self, f_mixed: Tensor, q_output: Tensor) -> tuple[Tensor, Tensor]:
        return self.head(f_mixed, q_output)

    def forward(self, frames: Tensor, audio: Tensor) -> MaskBundle:
        frames, audio = T.as_tensor(frames), T.as_tensor(audio)
        if frames.shape[0] != audio.shape[0]:
            raise ConfigError(
                f"frame count {frames.shape[0]} != audio frame count {audio.shape[0]}"
            )
        pyramid = self.feature_stub(frames)
        memory, f_mask = self.encode(pyramid)
        queries = self.generate_queries(audio)
        f_mixed, omega = self.mix(f_mask, audio)
        q_output = self.decode(queries.q_mixed, memory)
        logits, aux = self.mask_head(f_mixed, q_output)
        return MaskBundle(
            f_mask=f_mask, f_mixed=f_mixed, omega=omega, aux_logits=aux, logits=logits
        )

    __call__ = forward
