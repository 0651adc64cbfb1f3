"""Frozen-backbone inputs, model weights, and the tensor-bundle file format.

A tensor bundle is a directory holding ``manifest.json`` plus one raw
little-endian float32 blob per tensor (row-major, no header). The manifest
records name, dtype, shape and sha256 of every blob, so round-trips are
bit-exact and corruption is detected at load time. Feature bundles and
weight files both use this container; they differ only in their ``meta``
block. See docs/bundle_format.md for a worked byte-level example.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import Category, GroundTruth, Vocabulary
from .numerics import AttnWeights

BUNDLE_FORMAT = "tensor-bundle-v1"


class BundleError(ValueError):
    """Raised when a tensor bundle on disk is malformed or inconsistent."""


# ---------------------------------------------------------------------------
# generic tensor-bundle container
# ---------------------------------------------------------------------------

def write_tensor_bundle(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
        blob = arr.astype("<f4").tobytes()
        fname = name.replace("/", "_") + ".f32"
        (root / fname).write_bytes(blob)
        entries[name] = {
            "file": fname,
            "dtype": "float32",
            "shape": list(arr.shape),
            "sha256": hashlib.sha256(blob).hexdigest(),
        }
    manifest = {"format": BUNDLE_FORMAT, "tensors": entries, "meta": meta}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_tensor_bundle(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise BundleError(f"no manifest.json in {root}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != BUNDLE_FORMAT:
        raise BundleError(f"unsupported bundle format {manifest.get('format')!r}")
    tensors = {}
    for name, entry in manifest["tensors"].items():
        if entry["dtype"] != "float32":
            raise BundleError(f"tensor {name}: unsupported dtype {entry['dtype']}")
        fpath = root / entry["file"]
        if not fpath.is_file():
            raise BundleError(f"missing tensor file {entry['file']} for tensor {name}")
        blob = fpath.read_bytes()
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape)) * 4 if shape else 4
        if len(blob) != expected:
            raise BundleError(
                f"tensor {name}: blob has {len(blob)} bytes, shape {shape} needs {expected}"
            )
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise BundleError(f"tensor {name}: sha256 mismatch (corrupt blob)")
        tensors[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return tensors, manifest.get("meta", {})


# ---------------------------------------------------------------------------
# feature bundles
# ---------------------------------------------------------------------------

@dataclass
class FeatureBundle:
    """All frozen-backbone inputs for one image."""

    f_sam: np.ndarray  # (D_sam, H/16, W/16)
    f_clip: np.ndarray  # (D_clip, H_c, W_c)
    g_text: np.ndarray  # (C_test, D_emb), rows L2-normalized
    image_h: int
    image_w: int
    vocabulary: Vocabulary


def save_bundle(bundle: FeatureBundle, path: str | Path) -> None:
    meta = {
        "kind": "feature-bundle",
        "image_h": int(bundle.image_h),
        "image_w": int(bundle.image_w),
        "vocabulary": bundle.vocabulary.to_json_obj(),
    }
    tensors = {"f_sam": bundle.f_sam, "f_clip": bundle.f_clip, "g_text": bundle.g_text}
    write_tensor_bundle(path, tensors, meta)


def load_bundle(path: str | Path) -> FeatureBundle:
    tensors, meta = read_tensor_bundle(path)
    for name in ("f_sam", "f_clip", "g_text"):
        if name not in tensors:
            raise BundleError(f"missing tensor {name} in feature bundle")
    if meta.get("kind") != "feature-bundle":
        raise BundleError(f"bundle at {path} is not a feature bundle")
    vocab = Vocabulary.from_json_obj(meta["vocabulary"])
    g_text = tensors["g_text"]
    if g_text.shape[0] != vocab.size:
        raise BundleError(
            f"g_text has {g_text.shape[0]} rows but vocabulary has {vocab.size} categories"
        )
    norms = np.linalg.norm(g_text.astype(np.float64), axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-5):
        raise BundleError("text embedding not normalized (g_text rows must be unit L2)")
    return FeatureBundle(
        f_sam=tensors["f_sam"],
        f_clip=tensors["f_clip"],
        g_text=g_text,
        image_h=int(meta["image_h"]),
        image_w=int(meta["image_w"]),
        vocabulary=vocab,
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Knobs for the synthetic frozen-backbone fixture generator."""

    image_h: int = 64
    image_w: int = 64
    d_sam: int = 32
    d_clip: int = 32
    d_emb: int = 32
    c_test: int = 6
    n_gt_segments: int = 4
    sam_noise: float = 0.05
    clip_noise: float = 0.35
    n_seen: int | None = None  # default: half the vocabulary


def _coarse_voronoi(rng: np.random.Generator, gh: int, gw: int, n: int) -> np.ndarray:
    """Partition a gh x gw cell grid into n Voronoi regions around distinct cells."""
    cells = np.stack(np.meshgrid(np.arange(gh), np.arange(gw), indexing="ij"), axis=-1)
    seed_idx = rng.choice(gh * gw, size=n, replace=False)
    seeds = np.stack([seed_idx // gw, seed_idx % gw], axis=-1)
    d2 = np.sum((cells[:, :, None, :] - seeds[None, None, :, :]) ** 2, axis=-1)
    return np.argmin(d2, axis=-1)  # ties -> lower segment index


def synth_vocabulary(seed: int, c_test: int, n_seen: int | None = None) -> Vocabulary:
    """Seeded vocabulary with random thing/stuff flags and a seen-name subset."""
    rng = np.random.default_rng(seed)
    things = rng.random(c_test) < 0.5
    cats = [Category(id=i + 1, name=f"class_{i:02d}", is_thing=bool(things[i]))
            for i in range(c_test)]
    n_seen = c_test // 2 if n_seen is None else max(0, min(n_seen, c_test))
    seen_idx = rng.choice(c_test, size=n_seen, replace=False)
    return Vocabulary(categories=cats, seen_names=sorted(cats[i].name for i in seen_idx))


def synth_bundle(
    seed: int,
    spec: SynthSpec,
    vocabulary: Vocabulary | None = None,
    g_text: np.ndarray | None = None,
) -> tuple[FeatureBundle, GroundTruth]:
    """Deterministic synthetic (FeatureBundle, GroundTruth) pair.

    The ground-truth partition is a Voronoi tessellation drawn on the
    stride-16 cell grid and upsampled to pixels; features are constant per
    segment plus seeded Gaussian noise, so clustering can recover the
    partition. Segment boundaries are block-aligned at stride 16 (hence at
    stride 4 too), which makes stride-4 rasterization lossless.

    ``vocabulary``/``g_text`` let a multi-image dataset share one category
    set and text-embedding matrix across images; by default both are
    generated from the same seed.
    """
    h, w = spec.image_h, spec.image_w
    if h % 16 or w % 16:
        raise ValueError("image dims must be divisible by 16")
    gh, gw = h // 16, w // 16
    n = spec.n_gt_segments
    if n < 1:
        raise ValueError("n_gt_segments must be >= 1")
    if n > gh * gw:
        raise ValueError(f"n_gt_segments={n} exceeds the {gh * gw} stride-16 cells")
    if n > spec.c_test:
        raise ValueError("n_gt_segments exceeds vocabulary size (categories are sampled "
                         "without replacement)")
    rng = np.random.default_rng(seed)

    seg_cells = _coarse_voronoi(rng, gh, gw, n)  # (gh, gw)
    seg_pixels = np.repeat(np.repeat(seg_cells, 16, axis=0), 16, axis=1)

    def unit_rows(count: int, dim: int) -> np.ndarray:
        v = rng.standard_normal((count, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    base_sam = 3.0 * unit_rows(n, spec.d_sam)
    base_clip = 3.0 * unit_rows(n, spec.d_clip)

    f_sam = base_sam[seg_cells].transpose(2, 0, 1)
    f_sam = f_sam + spec.sam_noise * rng.standard_normal(f_sam.shape)

    seg_clip = np.repeat(np.repeat(seg_cells, 2, axis=0), 2, axis=1)  # stride-8 grid
    f_clip = base_clip[seg_clip].transpose(2, 0, 1)
    f_clip = f_clip + spec.clip_noise * rng.standard_normal(f_clip.shape)

    if g_text is None:
        g_text = unit_rows(spec.c_test, spec.d_emb)
    if g_text.shape != (spec.c_test, spec.d_emb):
        raise ValueError("g_text shape inconsistent with spec")
    vocab = vocabulary if vocabulary is not None else synth_vocabulary(seed, spec.c_test,
                                                                       spec.n_seen)
    if vocab.size != spec.c_test:
        raise ValueError("vocabulary size inconsistent with spec")

    class_idx = rng.choice(spec.c_test, size=n, replace=False)
    y_mask = np.stack([seg_pixels == s for s in range(n)])
    gt = GroundTruth(
        y_mask=y_mask,
        y_class=class_idx.astype(np.int64),
        is_thing=np.asarray([vocab.categories[i].is_thing for i in class_idx], dtype=bool),
    )
    bundle = FeatureBundle(
        f_sam=f_sam.astype(np.float32),
        f_clip=f_clip.astype(np.float32),
        g_text=np.asarray(g_text, dtype=np.float32),
        image_h=h,
        image_w=w,
        vocabulary=vocab,
    )
    return bundle, gt


# ---------------------------------------------------------------------------
# model weights
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchConfig:
    d_sam: int = 32
    d_clip: int = 32
    d_emb: int = 32
    d_pix: int = 256
    n_queries: int = 250
    layers: int = 9
    heads: int = 8
    fpn_conv_kernel: int = 3  # deconv kernel is fixed at 2 (exact x2 upsampling)

    def __post_init__(self) -> None:
        if self.d_pix % self.heads:
            raise ValueError("d_pix must be divisible by heads")
        if self.d_emb % self.heads:
            raise ValueError("d_emb must be divisible by heads")
        if self.fpn_conv_kernel % 2 == 0:
            raise ValueError("fpn_conv_kernel must be odd")


@dataclass
class LinearWeights:
    w: np.ndarray
    b: np.ndarray


@dataclass
class NormWeights:
    gain: np.ndarray
    bias: np.ndarray


@dataclass
class MlpWeights:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class FpnScaleWeights:
    kernel: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray
    norm: NormWeights


@dataclass
class FpnWeights:
    s32: FpnScaleWeights  # stride-2 conv
    s16: FpnScaleWeights  # 1x1 conv
    s8: FpnScaleWeights  # stride-2 deconv
    s4a: FpnScaleWeights  # first of two stride-2 deconvs
    s4b: FpnScaleWeights


@dataclass
class DecoderLayerWeights:
    cross_attn: AttnWeights
    norm1: NormWeights
    self_attn: AttnWeights
    norm2: NormWeights
    ffn: MlpWeights
    norm3: NormWeights


@dataclass
class DecoderWeights:
    query_embed: np.ndarray  # (N, d_pix)
    layers: list[DecoderLayerWeights]
    mask_mlp: MlpWeights  # d_pix -> d_pix -> d_pix
    iou_mlp: MlpWeights  # d_pix -> d_pix -> 1
    heads: int


@dataclass
class LdpWeights:
    sam_proj: LinearWeights  # d_pix -> d_emb
    clip_proj: LinearWeights  # d_clip -> d_emb
    attn: AttnWeights  # over d_emb, 2 tokens
    norm: NormWeights


@dataclass
class ModelWeights:
    fpn: FpnWeights
    decoder: DecoderWeights
    ldp: LdpWeights
    tau: float
    void_embed: np.ndarray  # (d_emb,)
    arch: ArchConfig


class _Alloc:
    """Allocation policy shared by seeded init and bundle loading, so both
    walk the weight tree in the identical order."""

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
        raise NotImplementedError

    def bias(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def gain(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def unit(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError


class _InitAlloc(_Alloc):
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def weight(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return self.rng.uniform(-bound, bound, size=shape).astype(np.float32)

    def bias(self, name, shape):
        return np.zeros(shape, dtype=np.float32)

    def gain(self, name, shape):
        return np.ones(shape, dtype=np.float32)

    def unit(self, name, shape):
        v = self.rng.standard_normal(shape)
        return (v / np.linalg.norm(v)).astype(np.float32)


class _DictAlloc(_Alloc):
    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = tensors
        self.used: set[str] = set()

    def _take(self, name, shape):
        if name not in self.tensors:
            raise BundleError(f"weights bundle is missing tensor {name}")
        arr = self.tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise BundleError(f"tensor {name}: shape {arr.shape} != expected {tuple(shape)}")
        self.used.add(name)
        return arr

    def weight(self, name, shape, fan_in):
        return self._take(name, shape)

    def bias(self, name, shape):
        return self._take(name, shape)

    def gain(self, name, shape):
        return self._take(name, shape)

    def unit(self, name, shape):
        return self._take(name, shape)


def _attn(alloc: _Alloc, prefix: str, d: int, heads: int) -> AttnWeights:
    return AttnWeights(
        wq=alloc.weight(f"{prefix}.wq", (d, d), d),
        wk=alloc.weight(f"{prefix}.wk", (d, d), d),
        wv=alloc.weight(f"{prefix}.wv", (d, d), d),
        wo=alloc.weight(f"{prefix}.wo", (d, d), d),
        bq=alloc.bias(f"{prefix}.bq", (d,)),
        bk=alloc.bias(f"{prefix}.bk", (d,)),
        bv=alloc.bias(f"{prefix}.bv", (d,)),
        bo=alloc.bias(f"{prefix}.bo", (d,)),
        n_heads=heads,
    )


def _norm(alloc: _Alloc, prefix: str, d: int) -> NormWeights:
    return NormWeights(gain=alloc.gain(f"{prefix}.gain", (d,)),
                       bias=alloc.bias(f"{prefix}.bias", (d,)))


def _linear(alloc: _Alloc, prefix: str, d_in: int, d_out: int) -> LinearWeights:
    return LinearWeights(w=alloc.weight(f"{prefix}.w", (d_in, d_out), d_in),
                         b=alloc.bias(f"{prefix}.b", (d_out,)))


def _mlp(alloc: _Alloc, prefix: str, d_in: int, d_hidden: int, d_out: int) -> MlpWeights:
    return MlpWeights(
        w1=alloc.weight(f"{prefix}.w1", (d_in, d_hidden), d_in),
        b1=alloc.bias(f"{prefix}.b1", (d_hidden,)),
        w2=alloc.weight(f"{prefix}.w2", (d_hidden, d_out), d_hidden),
        b2=alloc.bias(f"{prefix}.b2", (d_out,)),
    )


def _fpn_scale(alloc: _Alloc, prefix: str, c_in: int, c_out: int, kh: int, kw: int) -> FpnScaleWeights:
    return FpnScaleWeights(
        kernel=alloc.weight(f"{prefix}.kernel", (c_out, c_in, kh, kw), c_in * kh * kw),
        bias=alloc.bias(f"{prefix}.bias", (c_out,)),
        norm=_norm(alloc, f"{prefix}.norm", c_out),
    )


def _build_weights(arch: ArchConfig, alloc: _Alloc, tau: float) -> ModelWeights:
    k = arch.fpn_conv_kernel
    fpn = FpnWeights(
        s32=_fpn_scale(alloc, "fpn.s32", arch.d_sam, arch.d_pix, k, k),
        s16=_fpn_scale(alloc, "fpn.s16", arch.d_sam, arch.d_pix, 1, 1),
        s8=_fpn_scale(alloc, "fpn.s8", arch.d_sam, arch.d_pix, 2, 2),
        s4a=_fpn_scale(alloc, "fpn.s4a", arch.d_sam, arch.d_pix, 2, 2),
        s4b=_fpn_scale(alloc, "fpn.s4b", arch.d_pix, arch.d_pix, 2, 2),
    )
    layers = []
    for i in range(arch.layers):
        p = f"decoder.layers.{i}"
        layers.append(DecoderLayerWeights(
            cross_attn=_attn(alloc, f"{p}.cross_attn", arch.d_pix, arch.heads),
            norm1=_norm(alloc, f"{p}.norm1", arch.d_pix),
            self_attn=_attn(alloc, f"{p}.self_attn", arch.d_pix, arch.heads),
            norm2=_norm(alloc, f"{p}.norm2", arch.d_pix),
            ffn=_mlp(alloc, f"{p}.ffn", arch.d_pix, 2 * arch.d_pix, arch.d_pix),
            norm3=_norm(alloc, f"{p}.norm3", arch.d_pix),
        ))
    decoder = DecoderWeights(
        query_embed=alloc.weight("decoder.query_embed", (arch.n_queries, arch.d_pix), arch.d_pix),
        layers=layers,
        mask_mlp=_mlp(alloc, "decoder.mask_mlp", arch.d_pix, arch.d_pix, arch.d_pix),
        iou_mlp=_mlp(alloc, "decoder.iou_mlp", arch.d_pix, arch.d_pix, 1),
        heads=arch.heads,
    )
    ldp = LdpWeights(
        sam_proj=_linear(alloc, "ldp.sam_proj", arch.d_pix, arch.d_emb),
        clip_proj=_linear(alloc, "ldp.clip_proj", arch.d_clip, arch.d_emb),
        attn=_attn(alloc, "ldp.attn", arch.d_emb, arch.heads),
        norm=_norm(alloc, "ldp.norm", arch.d_emb),
    )
    void_embed = alloc.unit("void_embed", (arch.d_emb,))
    return ModelWeights(fpn=fpn, decoder=decoder, ldp=ldp, tau=tau,
                        void_embed=void_embed, arch=arch)


def init_weights(seed: int, arch: ArchConfig, tau: float = 0.07) -> ModelWeights:
    """Seeded scaled-uniform init (bound 1/sqrt(fan_in)); biases zero, norm
    gains one. tau defaults to 0.07."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return _build_weights(arch, _InitAlloc(seed), tau)


def _flatten_weights(weights: ModelWeights) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}

    # walks the tree with the same naming scheme _build_weights allocates under
    def collect(obj, prefix=""):
        if isinstance(obj, np.ndarray):
            out[prefix] = obj
        elif isinstance(obj, AttnWeights):
            for f in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"):
                out[f"{prefix}.{f}"] = getattr(obj, f)
        elif isinstance(obj, (LinearWeights, NormWeights, MlpWeights, FpnScaleWeights)):
            for fname, val in vars(obj).items():
                collect(val, f"{prefix}.{fname}")
        elif isinstance(obj, list):
            for i, item in enumerate(obj):
                collect(item, f"{prefix}.{i}")
        elif isinstance(obj, (FpnWeights, DecoderLayerWeights)):
            for fname, val in vars(obj).items():
                collect(val, f"{prefix}.{fname}")
        else:
            raise TypeError(f"unexpected node {type(obj)} at {prefix}")

    collect(weights.fpn, "fpn")
    collect(weights.decoder.query_embed, "decoder.query_embed")
    collect(weights.decoder.layers, "decoder.layers")
    collect(weights.decoder.mask_mlp, "decoder.mask_mlp")
    collect(weights.decoder.iou_mlp, "decoder.iou_mlp")
    collect(weights.ldp.sam_proj, "ldp.sam_proj")
    collect(weights.ldp.clip_proj, "ldp.clip_proj")
    collect(weights.ldp.attn, "ldp.attn")
    collect(weights.ldp.norm, "ldp.norm")
    out["void_embed"] = weights.void_embed
    return out


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    meta = {
        "kind": "model-weights",
        "arch": asdict(weights.arch),
        "tau": float(weights.tau),
    }
    write_tensor_bundle(path, _flatten_weights(weights), meta)


def load_weights(path: str | Path) -> ModelWeights:
    tensors, meta = read_tensor_bundle(path)
    if meta.get("kind") != "model-weights":
        raise BundleError(f"bundle at {path} is not a model-weights bundle")
    arch = ArchConfig(**meta["arch"])
    alloc = _DictAlloc(tensors)
    weights = _build_weights(arch, alloc, float(meta["tau"]))
    unused = set(tensors) - alloc.used
    if unused:
        raise BundleError(f"weights bundle has unexpected tensors: {sorted(unused)}")
    return weights
