"""Dilated-convolutional match-mismatch classifiers.

Per stimulus feature the model has an EEG stream (a kernel-size-1 spatial
filter followed by three dilated convolutions) and a stimulus stream (the
same three dilated convolutions with their own weights, shared between
slots A and B). Each EEG embedding is compared to both stimulus embeddings
with row-wise cosine similarity; the similarity blocks of all features are
concatenated, flattened and fed to a single sigmoid unit that scores
"slot A holds the match".
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ShapeError, SpecError


@dataclass(frozen=True)
class StreamSpec:
    feature: str
    fs: float
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 3, 9)
    channels: int = 16
    rf_budget_ms: float = 422.0
    segment_seconds: float | None = None

    @property
    def receptive_field(self) -> int:
        """Input samples seen by one output sample of the dilated stack."""
        return (self.kernel_size - 1) * sum(self.dilations) + 1

    @property
    def receptive_field_ms(self) -> float:
        return 1000.0 * self.receptive_field / self.fs

    def validate(self):
        if self.kernel_size < 1 or not self.dilations or min(self.dilations) < 1:
            raise SpecError(f"{self.feature}: invalid kernel size or dilations")
        limit = self.rf_budget_ms / 1000.0 * self.fs + 0.5
        if self.receptive_field > limit:
            raise SpecError(
                f"{self.feature}: receptive field {self.receptive_field} samples "
                f"({self.receptive_field_ms:.1f} ms) exceeds the {self.rf_budget_ms} ms budget"
            )

    def output_length(self, n_samples: int) -> int:
        return n_samples - self.receptive_field + 1


ENVELOPE_STREAM = StreamSpec("envelope", 64.0, 3, (1, 3, 9), 16, 422.0)
F0_STREAM = StreamSpec("f0", 1024.0, 3, (1, 5, 12), 16, 36.0)


@dataclass(frozen=True)
class ModelSpec:
    streams: tuple[StreamSpec, ...]
    eeg_channels: int = 64
    spatial_channels: int = 16

    @property
    def features(self) -> tuple[str, ...]:
        return tuple(s.feature for s in self.streams)

    @property
    def head_inputs(self) -> int:
        return sum(self.spatial_channels * 2 * s.channels for s in self.streams) if self.streams else 0

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in d["streams"]:
            s["dilations"] = list(s["dilations"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        streams = tuple(
            StreamSpec(**{**s, "dilations": tuple(s["dilations"])}) for s in d["streams"]
        )
        return cls(streams=streams, eeg_channels=d["eeg_channels"], spatial_channels=d["spatial_channels"])


@dataclass
class ModelState:
    """Architecture plus named parameters (insertion order is the layer order)."""

    spec: ModelSpec
    params: dict[str, ad.Parameter] = field(default_factory=dict)

    def parameters(self) -> list[ad.Parameter]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def copy(self) -> "ModelState":
        return ModelState(self.spec, {k: ad.Parameter(p.data, name=k) for k, p in self.params.items()})

    def weights(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_weights(self, weights: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.data = np.array(weights[k], dtype=p.data.dtype, copy=True)
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)

    def astype(self, dtype) -> "ModelState":
        out = ModelState(self.spec)
        for k, p in self.params.items():
            out.params[k] = ad.Parameter(p.data.astype(dtype), name=k)
        return out


def _glorot(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _add_conv(state, rng, name, c_out, c_in, k, dtype):
    w = _glorot(rng, (c_out, c_in, k), c_in * k, c_out * k, dtype)
    state.params[f"{name}.w"] = ad.Parameter(w, name=f"{name}.w")
    state.params[f"{name}.b"] = ad.Parameter(np.zeros(c_out, dtype=dtype), name=f"{name}.b")


def build_multi(
    streams, eeg_channels: int = 64, spatial_channels: int = 16, seed: int = 0, dtype=np.float64
) -> ModelState:
    """N-feature model: one (EEG, stimulus) stream pair per feature, one head."""
    streams = tuple(streams)
    if not streams:
        raise SpecError("need at least one stream")
    names = [s.feature for s in streams]
    if len(set(names)) != len(names):
        raise SpecError(f"duplicate feature names {names}")
    durations = {s.segment_seconds for s in streams if s.segment_seconds is not None}
    if len(durations) > 1:
        raise SpecError(f"streams use different segment durations: {sorted(durations)}")
    for s in streams:
        s.validate()
        if s.channels != spatial_channels:
            raise SpecError(
                f"{s.feature}: conv channels ({s.channels}) must equal spatial channels "
                f"({spatial_channels}) for square similarity blocks"
            )
    spec = ModelSpec(streams, eeg_channels, spatial_channels)
    rng = np.random.default_rng(seed)
    state = ModelState(spec)
    for s in streams:
        f = s.feature
        _add_conv(state, rng, f"{f}.eeg.spatial", spatial_channels, eeg_channels, 1, dtype)
        c_in = spatial_channels
        for i, _ in enumerate(s.dilations):
            _add_conv(state, rng, f"{f}.eeg.conv{i}", s.channels, c_in, s.kernel_size, dtype)
            c_in = s.channels
        c_in = 1
        for i, _ in enumerate(s.dilations):
            _add_conv(state, rng, f"{f}.stim.conv{i}", s.channels, c_in, s.kernel_size, dtype)
            c_in = s.channels
    n_in = spec.head_inputs
    state.params["head.w"] = ad.Parameter(_glorot(rng, (n_in, 1), n_in, 1, dtype), name="head.w")
    state.params["head.b"] = ad.Parameter(np.zeros(1, dtype=dtype), name="head.b")
    return state


def build_single(stream: StreamSpec, eeg_channels: int = 64, **kwargs) -> ModelState:
    """Single-feature model (the N = 1 case of :func:`build_multi`)."""
    return build_multi([stream], eeg_channels=eeg_channels, **kwargs)


def _stack(state: ModelState, prefix: str, x, stream: StreamSpec):
    p = state.params
    for i, d in enumerate(stream.dilations):
        x = ad.conv1d(
            x, p[f"{prefix}.conv{i}.w"], p[f"{prefix}.conv{i}.b"], d, relu=True, name=f"{prefix}.conv{i}"
        )
    return x


def _check_inputs(state: ModelState, inputs: dict):
    spec = state.spec
    missing = set(spec.features) - set(inputs)
    if missing:
        raise ShapeError(f"missing inputs for features {sorted(missing)}")
    batch = None
    for s in spec.streams:
        eeg, a, b = (np.asarray(getattr(v, "data", v)) for v in inputs[s.feature])
        if eeg.ndim != 3 or eeg.shape[1] != spec.eeg_channels:
            raise ShapeError(
                f"{s.feature}: EEG input must be [B, {spec.eeg_channels}, T], got {eeg.shape}"
            )
        if a.shape != (eeg.shape[0], 1, eeg.shape[2]) or b.shape != a.shape:
            raise ShapeError(
                f"{s.feature}: stimulus inputs must be [B, 1, {eeg.shape[2]}], got {a.shape}, {b.shape}"
            )
        if s.output_length(eeg.shape[2]) <= 0:
            raise ShapeError(
                f"{s.feature}: {eeg.shape[2]} samples cannot cover the receptive field of "
                f"{s.receptive_field} samples"
            )
        if batch is not None and eeg.shape[0] != batch:
            raise ShapeError("all features must share the batch size")
        batch = eeg.shape[0]


def similarity_blocks(state: ModelState, inputs: dict) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Per feature, the ``[B, 16, 16]`` similarities of the EEG embedding with
    the slot-A and slot-B stimulus embeddings."""
    _check_inputs(state, inputs)
    p = state.params
    blocks = []
    for s in state.spec.streams:
        f = s.feature
        eeg, a, b = inputs[f]
        e = ad.conv1d(
            eeg, p[f"{f}.eeg.spatial.w"], p[f"{f}.eeg.spatial.b"], 1, name=f"{f}.eeg.spatial"
        )
        e = _stack(state, f"{f}.eeg", e, s)
        ea = _stack(state, f"{f}.stim", a, s)
        eb = _stack(state, f"{f}.stim", b, s)
        blocks.append((ad.cosine_rows(e, ea), ad.cosine_rows(e, eb)))
    return blocks


def head(state: ModelState, blocks) -> ad.Tensor:
    """Concatenate ``[S_A | S_B]`` per feature, flatten, dense, sigmoid."""
    parts = [t for pair in blocks for t in pair]
    x = ad.flatten(ad.concat(parts, axis=2))
    return ad.sigmoid(ad.dense(x, state.params["head.w"], state.params["head.b"]))


def forward(state: ModelState, inputs: dict) -> ad.Tensor:
    """Probability ``[B, 1]`` that slot A holds the matched stimulus.

    ``inputs`` maps each feature to ``(eeg [B,C,T], slot_a [B,1,T], slot_b [B,1,T])``.
    """
    return head(state, similarity_blocks(state, inputs))


def predict_arrays(state: ModelState, inputs: dict) -> tuple[np.ndarray, np.ndarray]:
    """Score both orderings of a batch of pairs without a gradient graph.

    ``inputs`` maps features to ``(eeg, matched, mismatched)``. Returns
    ``(p_match_in_A, p_match_in_B)``, each of shape ``[B]``, where the second
    is the model's output with the mismatch in slot A.
    """
    frozen = ModelState(state.spec, {k: ad.Tensor(v.data) for k, v in state.params.items()})
    blocks = similarity_blocks(frozen, inputs)
    first = head(frozen, blocks).data[:, 0]
    second = head(frozen, [(b, a) for a, b in blocks]).data[:, 0]
    return first, second


def predict_pair(state: ModelState, pair) -> dict:
    """Probabilities for both slot orderings of one :class:`SegmentPair`."""
    inputs = {
        f: (pair.eeg[f][None], pair.matched[f][None], pair.mismatched[f][None])
        for f in state.spec.features
    }
    dtype = state.params["head.w"].data.dtype
    inputs = {f: tuple(np.asarray(v, dtype=dtype) for v in t) for f, t in inputs.items()}
    p_a, p_b = predict_arrays(state, inputs)
    return {"match_slot_A": float(p_a[0]), "match_slot_B": float(p_b[0])}


def decisions_correct(p_match_in_a: np.ndarray, p_match_in_b: np.ndarray) -> np.ndarray:
    """Correctness of the two decisions per pair; a tie at 0.5 counts as wrong."""
    return np.stack([p_match_in_a > 0.5, p_match_in_b < 0.5], axis=1)


def with_segment(stream: StreamSpec, seconds: float) -> StreamSpec:
    return replace(stream, segment_seconds=seconds)
