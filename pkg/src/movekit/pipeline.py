"""Checkpoints, the routed forward pass, the three training stages and ablation.

A :class:`Checkpoint` bundles every parameter of the model. Stage functions
take a checkpoint and return a new one (inputs are never mutated), together
with metrics records. Frozen sections are carried over by reference-free
copy, so a frozen section serialises to the same bytes before and after.
"""

from __future__ import annotations

import copy
import hashlib
import io
import json
import struct
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import decoder as dec
from . import numerics as nx
from . import router as rt
from . import synthdata as sd
from . import vision as vi
from .adapters import AdapterParams, adapt, adapt_backward, build_adapters
from .config import RunConfig, StageConfig
from .errors import CheckpointError, ConfigurationError, DataError, TrainingDivergence

CKPT_MAGIC = b"MOVECKPT"
CKPT_VERSION = 1
SECTIONS = ("encoders", "router", "adapters", "decoder", "rng")

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}

FEATURE_CHUNK = 500
EVAL_CHUNK = 256
MAX_CAPTION = 12


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    profile: str
    specs: list[vi.EncoderSpec]
    encoders: list[dict[str, np.ndarray]]
    router: rt.RouterParams
    adapters: list[AdapterParams]
    decoder_cfg: dec.DecoderConfig
    decoder: dict[str, np.ndarray]
    vocab: dec.Vocab
    provenance: tuple[str, ...] = ()
    rng_state: dict = field(default_factory=dict)

    @property
    def n_experts(self) -> int:
        return len(self.specs)

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)

    # -- serialisation -----------------------------------------------------

    def section_bytes(self) -> dict[str, bytes]:
        enc = io.BytesIO()
        spec_text = "".join(_spec_line(s) for s in self.specs)
        _put_text(enc, spec_text)
        _put_tensors(enc, {f"{i}.{k}": v for i, p in enumerate(self.encoders) for k, v in p.items()})

        rtr = io.BytesIO()
        _put_tensors(rtr, self.router.as_dict())

        ada = io.BytesIO()
        _put_tensors(ada, {f"{a.expert}.{k}": v for a in self.adapters for k, v in a.params.items()})

        dcd = io.BytesIO()
        c = self.decoder_cfg
        _put_text(dcd, f"{c.vocab_size} {c.d_model} {c.n_layers} {c.n_heads} {c.context} {c.mlp_hidden}")
        _put_text(dcd, self.vocab.to_text())
        _put_tensors(dcd, self.decoder)

        rng = io.BytesIO()
        _put_text(rng, json.dumps(self.rng_state, sort_keys=True))
        return {"encoders": enc.getvalue(), "router": rtr.getvalue(), "adapters": ada.getvalue(),
                "decoder": dcd.getvalue(), "rng": rng.getvalue()}

    def to_bytes(self) -> bytes:
        out = io.BytesIO()
        out.write(CKPT_MAGIC)
        out.write(struct.pack("<I", CKPT_VERSION))
        _put_text(out, f"profile={self.profile}\nprovenance={','.join(self.provenance)}\n")
        sections = self.section_bytes()
        out.write(struct.pack("<I", len(SECTIONS)))
        for name in SECTIONS:
            payload = sections[name]
            _put_text(out, name)
            out.write(struct.pack("<QI", len(payload), zlib.crc32(payload)))
            out.write(payload)
        return out.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise CheckpointError(f"cannot write checkpoint {path}: {exc}", section="file") from exc

    @classmethod
    def from_bytes(cls, buf: bytes, source: str = "<checkpoint>") -> "Checkpoint":
        r = _Reader(buf, source)
        with r.section("header"):
            if r.take(len(CKPT_MAGIC)) != CKPT_MAGIC:
                raise CheckpointError(f"{source}: not a checkpoint (bad magic)", section="header")
            (version,) = r.unpack("<I")
            if version != CKPT_VERSION:
                raise CheckpointError(f"{source}: unsupported checkpoint version {version}", section="header")
            meta = dict(line.split("=", 1) for line in r.text().splitlines() if line)
            (n_sections,) = r.unpack("<I")
        payloads = {}
        for _ in range(n_sections):
            with r.section("table"):
                name = r.text()
            with r.section(name):
                length, crc = r.unpack("<QI")
                payload = r.take(length)
                if zlib.crc32(payload) != crc:
                    raise CheckpointError(f"{source}: section {name!r} is corrupt (CRC mismatch)", section=name)
            payloads[name] = payload
        if r.remaining():
            raise CheckpointError(f"{source}: trailing bytes after the last section", section="table")
        for name in SECTIONS:
            if name not in payloads:
                raise CheckpointError(f"{source}: missing section {name!r}", section=name)

        with _Reader(payloads["encoders"], source).section("encoders") as s:
            specs = [_parse_spec(line) for line in s.text().splitlines()]
            flat = s.tensors()
            encoders = [{k.split(".", 1)[1]: v for k, v in flat.items() if k.split(".", 1)[0] == str(i)}
                        for i in range(len(specs))]
        with _Reader(payloads["router"], source).section("router") as s:
            t = s.tensors()
            router = rt.RouterParams(t["w"], t.get("b"))
        with _Reader(payloads["adapters"], source).section("adapters") as s:
            flat = s.tensors()
            experts = sorted({int(k.split(".", 1)[0]) for k in flat})
            adapters = [AdapterParams(e, {k.split(".", 1)[1]: v for k, v in flat.items()
                                          if k.split(".", 1)[0] == str(e)}) for e in experts]
        with _Reader(payloads["decoder"], source).section("decoder") as s:
            dims = [int(x) for x in s.text().split()]
            dcfg = dec.DecoderConfig(*dims)
            vocab = dec.Vocab.from_text(s.text())
            dparams = s.tensors()
        with _Reader(payloads["rng"], source).section("rng") as s:
            rng_state = json.loads(s.text())
        prov = meta.get("provenance", "")
        return cls(meta.get("profile", "desk"), specs, encoders, router, adapters, dcfg, dparams, vocab,
                   tuple(p for p in prov.split(",") if p), rng_state)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}", section="file") from exc
        return cls.from_bytes(buf, source=str(path))

    def section_digests(self) -> dict[str, str]:
        """sha256 of each serialised section; equal digests mean bit-identical tensors."""
        return {k: hashlib.sha256(v).hexdigest() for k, v in self.section_bytes().items()}


def _spec_line(s: vi.EncoderSpec) -> str:
    return f"{s.name} {s.expert} {s.patch} {s.resolution} {s.width} {s.reduction.describe()} {s.channels}\n"


def _parse_spec(line: str) -> vi.EncoderSpec:
    name, expert, patch, res, width, red, ch = line.split()
    return vi.EncoderSpec(name, int(expert), int(patch), int(res), int(width), vi.Reduction.parse(red), int(ch))


def _put_text(out: io.BytesIO, text: str) -> None:
    raw = text.encode("utf-8")
    out.write(struct.pack("<I", len(raw)))
    out.write(raw)


def _put_tensors(out: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    out.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}", section="encode")
        _put_text(out, name)
        out.write(struct.pack("<BB", code, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


class _Reader:
    def __init__(self, buf: bytes, source: str):
        self.buf = buf
        self.pos = 0
        self.source = source
        self.name = "header"

    def section(self, name: str) -> "_Reader":
        self.name = name
        return self

    def __enter__(self) -> "_Reader":
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is None or issubclass(exc_type, CheckpointError):
            return False
        if issubclass(exc_type, (struct.error, ValueError, KeyError, UnicodeDecodeError, IndexError, TypeError)):
            raise CheckpointError(f"{self.source}: section {self.name!r} is malformed: {exc}",
                                  section=self.name) from exc
        return False

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int) -> bytes:
        if n > self.remaining():
            raise CheckpointError(f"{self.source}: section {self.name!r} is truncated", section=self.name)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def text(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            name = self.text()
            code, ndim = self.unpack("<BB")
            shape = self.unpack(f"<{ndim}I")
            dt = _DTYPES[code]
            n = int(np.prod(shape, dtype=np.int64))
            arr = np.frombuffer(self.take(n * dt.itemsize), dtype=dt).reshape(shape)
            out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        return out


# ---------------------------------------------------------------------------
# Initialisation (offline pre-fits stand in for pretrained backbones)
# ---------------------------------------------------------------------------


def prefit_samples(seed: int, count: int) -> list[sd.Sample]:
    """Balanced samples from the ``prefit`` seed namespace."""
    return [sd.gen_sample(label, sd.sample_seed(seed, "prefit", label, i))
            for i in range(count) for label in range(sd.N_CLASSES)]


def prefit_decoder(params, cfg: dec.DecoderConfig, vocab: dec.Vocab, specs, samples, steps: int,
                   rng: np.random.Generator, batch_size: int = 32, learning_rate: float = 2e-3) -> list[float]:
    """Text-only caption modelling with all-zero visual slots, in place."""
    dtype = params["tok_emb"].dtype
    tokens = [specs[s.label].tokens for s in samples]
    ids = [vocab.encode(s.caption) for s in samples]
    opt = nx.AdamW(params, nx.OptimizerConfig(learning_rate))
    trace = []
    for step in range(steps):
        idx = rng.integers(0, len(samples), size=batch_size)
        seqs = [dec.assemble(np.zeros((tokens[i], cfg.d_model), dtype=dtype), [], ids[i]) for i in idx]
        loss, grads, _ = dec.grouped_batch_loss(params, cfg, seqs)
        if not np.isfinite(loss):
            raise TrainingDivergence("decoder pre-fit diverged", step=step)
        opt.step(grads)
        trace.append(float(loss))
    return trace


def init_checkpoint(run: RunConfig) -> Checkpoint:
    """Fresh model: pre-fitted encoders and decoder, zero router, new adapters."""
    dtype = nx.float_dtype()
    specs = vi.profile_specs(run.profile)
    encoders = []
    prefit_cfg = vi.PrefitConfig(steps=run.prefit_encoder_steps)
    for spec in specs:
        rng = np.random.default_rng([run.seed, 100 + spec.expert])
        params = vi.init_encoder(spec, rng, dtype=dtype)
        if run.prefit_encoder_steps > 0:
            images = sd.domain_images(spec.expert, run.prefit_images, run.seed)
            vi.prefit_encoder(spec, params, images, prefit_cfg, rng)
        encoders.append(params)
    router = rt.RouterParams.zeros(specs[vi.GENERAL].width, len(specs), bias=run.router_bias, dtype=dtype)
    adapters = build_adapters(specs, dec.DecoderConfig(1).d_model, seed=run.seed, dtype=dtype)
    vocab = dec.Vocab.default()
    dcfg = dec.DecoderConfig(len(vocab))
    rng = np.random.default_rng([run.seed, 200])
    dparams = dec.init_decoder(dcfg, rng, dtype=dtype)
    if run.prefit_decoder_steps > 0:
        samples = prefit_samples(run.seed, run.prefit_images)
        prefit_decoder(dparams, dcfg, vocab, specs, samples, run.prefit_decoder_steps, rng)
    return Checkpoint(run.profile, specs, encoders, router, adapters, dcfg, dparams, vocab,
                      ("init",), {"seed": run.seed, "stage": "init"})


# ---------------------------------------------------------------------------
# Routed inference
# ---------------------------------------------------------------------------


def encoder_features(ckpt: Checkpoint, expert: int, images: np.ndarray,
                     counter: rt.OpCounter | None = None) -> np.ndarray:
    """Raw features ``(B, T_raw, D)`` of one expert, in chunks."""
    spec, params = ckpt.specs[expert], ckpt.encoders[expert]
    if counter is not None:
        counter.add("encoder_forward", len(images))
        counter.add(f"encoder_forward:{spec.name}", len(images))
    if len(images) == 0:
        return np.zeros((0, spec.raw_tokens, spec.width), dtype=params["patch.w"].dtype)
    return np.concatenate([vi.encode_batch(spec, params, images[i:i + FEATURE_CHUNK])
                           for i in range(0, len(images), FEATURE_CHUNK)])


@dataclass
class ForwardResult:
    expert: int
    logits: np.ndarray  # (L, V) over [visual][BOS][prompt]
    forced: bool = False
    route_logits: np.ndarray | None = None


def forward(ckpt: Checkpoint, image: np.ndarray, prompt_ids=(), override: int | None = None,
            counter: rt.OpCounter | None = None) -> ForwardResult:
    """route -> encode(selected) -> reduce -> adapt -> assemble -> decoder.

    The general encoder runs once for the routing features; when the router
    picks expert 0 those features are reused. With ``override`` the router is
    skipped and only the forced expert runs.
    """
    image = np.asarray(image)[None]
    raw = None
    logits_r = None
    if override is None:
        raw = encoder_features(ckpt, vi.GENERAL, image, counter)
        logits_r = rt.route_logits(rt.mean_pool(raw), ckpt.router, counter)
        expert = rt.select_expert(logits_r[0])
    else:
        if override not in range(ckpt.n_experts):
            raise ConfigurationError(f"override expert {override} outside 0..{ckpt.n_experts - 1}")
        expert = override
    if raw is None or expert != vi.GENERAL:
        raw = encoder_features(ckpt, expert, image, counter)
    spec = ckpt.specs[expert]
    visual = adapt(ckpt.adapters[expert], vi.reduce_batch(spec, raw))[0]
    ids = np.array([dec.VISUAL] * len(visual) + [dec.BOS, *prompt_ids], dtype=np.int64)
    batch = dec.Batch(ids[None], np.zeros((1, len(ids)), dtype=bool), [visual],
                      np.array([len(visual)]), np.array([len(ids)]))
    x = dec.embed(ckpt.decoder, batch)
    out, _ = dec.forward(ckpt.decoder, ckpt.decoder_cfg, x)
    return ForwardResult(expert, out[0], override is not None,
                         None if logits_r is None else logits_r[0])


class FeatureBank:
    """Frozen-encoder features for one split, computed lazily and cached.

    The general encoder's raw features double as routing features and as
    expert 0's visual input, so they are computed once.
    """

    def __init__(self, ckpt: Checkpoint, split: sd.Split):
        self.ckpt = ckpt
        self.split = split
        self.general_raw = encoder_features(ckpt, vi.GENERAL, split.images)
        self.pooled = rt.mean_pool(self.general_raw)
        self._reduced: dict[int, np.ndarray] = {}

    def reduced(self, expert: int) -> np.ndarray:
        if expert not in self._reduced:
            if expert == vi.GENERAL:
                raw = self.general_raw
            else:
                raw = encoder_features(self.ckpt, expert, self.split.images)
            self._reduced[expert] = vi.reduce_batch(self.ckpt.specs[expert], raw)
        return self._reduced[expert]

    def routes(self, router: rt.RouterParams) -> np.ndarray:
        return rt.select_experts(rt.route_logits(self.pooled, router))


# ---------------------------------------------------------------------------
# Metrics records
# ---------------------------------------------------------------------------


def format_record(rec: dict) -> str:
    """One JSON object per line with fixed-format decimals (locale-free)."""
    parts = []
    for key, val in rec.items():
        if val is None:
            txt = "null"
        elif isinstance(val, str):
            txt = json.dumps(val)
        elif isinstance(val, (bool, np.bool_)):
            txt = "true" if val else "false"
        elif isinstance(val, (int, np.integer)):
            txt = str(int(val))
        elif isinstance(val, (list, tuple)):
            txt = "[" + ", ".join(str(int(v)) for v in val) + "]"
        elif key == "lr":
            txt = f"{float(val):.8f}"
        else:
            txt = f"{float(val):.6f}"
        parts.append(f"{json.dumps(key)}: {txt}")
    return "{" + ", ".join(parts) + "}"


def write_metrics(path: str | Path, stage: str, records: list[dict]) -> None:
    """Replace ``stage``'s records in the metrics file, keeping other stages."""
    path = Path(path)
    kept = []
    if path.exists():
        for line in path.read_text().splitlines():
            if line and json.loads(line).get("stage") != stage:
                kept.append(line)
    kept.extend(format_record(r) for r in records)
    order = {s: i for i, s in enumerate(("router", "pretrain", "finetune"))}
    kept.sort(key=lambda line: order.get(json.loads(line)["stage"], 99))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(line + "\n" for line in kept))
    except OSError as exc:
        raise DataError(f"cannot write metrics {path}: {exc}") from exc


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line]


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Checkpoint
    records: list[dict]
    summary: dict = field(default_factory=dict)


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.t0 = time.perf_counter()

    def ms(self):
        return round((time.perf_counter() - self.t0) * 1000.0, 3) if self.enabled else None


def _rng_record(rng: np.random.Generator, cfg: StageConfig) -> dict:
    st = rng.bit_generator.state
    return {"stage": cfg.stage, "seed": cfg.seed,
            "state": {"state": str(st["state"]["state"]), "inc": str(st["state"]["inc"])}}


def run_stage1(ckpt: Checkpoint, data: sd.Dataset, cfg: StageConfig, timing: bool = False,
               train_bank: FeatureBank | None = None, heldout_bank: FeatureBank | None = None) -> StageResult:
    """Router training on pooled frozen general-encoder features."""
    if cfg.steps == 0:
        return StageResult(ckpt, [], {"steps": 0})
    clock = _Clock(timing)
    train_bank = train_bank or FeatureBank(ckpt, data.train)
    heldout_bank = heldout_bank or FeatureBank(ckpt, data.heldout)
    res = rt.train_router(train_bank.pooled, data.train.labels, cfg, ckpt.router,
                          heldout=(heldout_bank.pooled, data.heldout.labels))
    out = replace(ckpt.copy(), router=res.params)
    out.provenance = ckpt.provenance + (f"router:{cfg.steps}",)
    rng = np.random.default_rng(cfg.seed)
    out.rng_state = _rng_record(rng, cfg)
    records = [dict(r, wall_ms=clock.ms()) for r in res.trace]
    acc = rt.accuracy(res.params, heldout_bank.pooled, data.heldout.labels)
    return StageResult(out, records, {"heldout_accuracy": acc, "steps": cfg.steps})


def stage_params(ckpt: Checkpoint, decoder_keys, router: bool) -> dict[str, np.ndarray]:
    """Trainable views (shared arrays) named ``adapters.i.*``, ``decoder.*``, ``router.*``."""
    params = {}
    for a in ckpt.adapters:
        for k, v in a.params.items():
            params[f"adapters.{a.expert}.{k}"] = v
    for k in decoder_keys:
        params[f"decoder.{k}"] = ckpt.decoder[k]
    if router:
        for k, v in ckpt.router.as_dict().items():
            params[f"router.{k}"] = v
    return params


def _visual_batch(ckpt: Checkpoint, bank: FeatureBank, idx: np.ndarray, experts: np.ndarray, keep_cache: bool):
    """Adapted visual tokens per sample plus per-expert backward caches."""
    visual = [None] * len(idx)
    caches = {}
    for e in range(ckpt.n_experts):
        rows = np.nonzero(experts == e)[0]
        if len(rows) == 0:
            continue
        y = adapt(ckpt.adapters[e], bank.reduced(e)[idx[rows]], keep_cache=keep_cache)
        if keep_cache:
            y, c = y
            caches[e] = (rows, c)
        for r, j in enumerate(rows):
            visual[j] = y[r]
    return visual, caches


def _train_lm(ckpt: Checkpoint, data: sd.Dataset, cfg: StageConfig, decoder_keys, router_trainable: bool,
              timing: bool, train_bank: FeatureBank | None, heldout_bank: FeatureBank | None,
              route_override: int | None = None) -> StageResult:
    if route_override is not None and route_override not in range(ckpt.n_experts):
        raise ConfigurationError(f"route override {route_override} outside 0..{ckpt.n_experts - 1}")
    clock = _Clock(timing)
    out = ckpt.copy()
    train_bank = train_bank or FeatureBank(out, data.train)
    heldout_bank = heldout_bank or FeatureBank(out, data.heldout)
    ids = [out.vocab.encode(c) for c in data.train.captions]
    labels = data.train.labels
    params = stage_params(out, decoder_keys, router_trainable)
    opt = nx.AdamW(params, cfg.optimizer())
    rng = np.random.default_rng(cfg.seed)
    if route_override is not None:
        fixed_routes = np.full(len(labels), route_override, dtype=np.int64)
    else:
        fixed_routes = None if router_trainable else train_bank.routes(out.router)
    updates = np.zeros(out.n_experts, dtype=np.int64)
    routed = np.zeros(out.n_experts, dtype=np.int64)
    records, window = [], []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(labels), size=cfg.batch_size)
        grads = {}
        if fixed_routes is None:
            x = train_bank.pooled[idx]
            r_logits = rt.route_logits(x, out.router)
            experts = rt.select_experts(r_logits)
            _, dl = nx.cross_entropy_rows(r_logits, labels[idx])
            grads["router.w"] = x.T @ dl
            if out.router.b is not None:
                grads["router.b"] = dl.sum(axis=0)
        else:
            experts = fixed_routes[idx]
        visual, caches = _visual_batch(out, train_bank, idx, experts, keep_cache=True)
        seqs = [dec.assemble(v, [], ids[i]) for v, i in zip(visual, idx)]
        loss, g, d_vis = dec.grouped_batch_loss(out.decoder, out.decoder_cfg, seqs)
        if not np.isfinite(loss):
            raise TrainingDivergence(f"{cfg.stage}: loss is non-finite at step {step}", step=step)
        for k in decoder_keys:
            grads[f"decoder.{k}"] = g[k]
        for e, (rows, c) in caches.items():
            _, ga = adapt_backward(np.stack([d_vis[j] for j in rows]), c)
            for k, v in ga.items():
                grads[f"adapters.{e}.{k}"] = v
            updates[e] += 1
            routed[e] += len(rows)
        try:
            opt.step(grads)
        except TrainingDivergence as exc:
            raise TrainingDivergence(f"{cfg.stage}: {exc} at step {step}", param=exc.param, step=step) from None
        window.append(loss)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            records.append({"stage": cfg.stage, "step": step, "loss": float(np.mean(window)),
                            "lr": cfg.learning_rate, "wall_ms": clock.ms()})
            window = []
    out.provenance = ckpt.provenance + (f"{cfg.stage}:{cfg.steps}",)
    out.rng_state = _rng_record(rng, cfg)
    if route_override is not None:
        held_routes = np.full(len(heldout_bank.split), route_override, dtype=np.int64)
    else:
        held_routes = heldout_bank.routes(out.router)
    losses = domain_losses(out, heldout_bank, held_routes)
    eval_loss = float(np.mean(losses))
    records.append({"stage": cfg.stage, "step": cfg.steps, "loss": eval_loss, "lr": cfg.learning_rate,
                    "split": "heldout", "updates": updates.tolist(), "wall_ms": clock.ms()})
    return StageResult(out, records, {"eval_loss": eval_loss, "domain_loss": losses,
                                      "updates": updates, "routed": routed, "steps": cfg.steps})


def decoder_stage2_keys(train_embedding: bool) -> tuple[str, ...]:
    return ("tok_emb",) if train_embedding else ()


def run_stage2(ckpt: Checkpoint, data: sd.Dataset, cfg: StageConfig, train_embedding: bool = True,
               router_trainable: bool = False, timing: bool = False, train_bank: FeatureBank | None = None,
               heldout_bank: FeatureBank | None = None, route_override: int | None = None) -> StageResult:
    """Adapter pre-training: adapters (and the token embedding) learn captioning.

    Encoders and the rest of the decoder stay frozen; the router is frozen
    unless ``router_trainable``, in which case it keeps fitting the domain
    labels alongside. ``route_override`` sends every sample to one expert.
    """
    if cfg.steps == 0:
        return StageResult(ckpt, [], {"steps": 0})
    return _train_lm(ckpt, data, cfg, decoder_stage2_keys(train_embedding), router_trainable,
                     timing, train_bank, heldout_bank, route_override)


def run_stage3(ckpt: Checkpoint, data: sd.Dataset, cfg: StageConfig, timing: bool = False,
               train_bank: FeatureBank | None = None, heldout_bank: FeatureBank | None = None,
               route_override: int | None = None) -> StageResult:
    """Fine-tuning: decoder and adapters train; router and encoders frozen."""
    if cfg.steps == 0:
        return StageResult(ckpt, [], {"steps": 0})
    return _train_lm(ckpt, data, cfg, tuple(sorted(ckpt.decoder)), False, timing, train_bank, heldout_bank,
                     route_override)


# ---------------------------------------------------------------------------
# Evaluation and ablation
# ---------------------------------------------------------------------------


def sequence_losses(ckpt: Checkpoint, bank: FeatureBank, idx: np.ndarray, experts: np.ndarray) -> np.ndarray:
    """Per-sample mean caption loss for samples ``idx`` routed to ``experts``."""
    out = np.zeros(len(idx))
    ids = [ckpt.vocab.encode(bank.split.captions[i]) for i in idx]
    for s in range(0, len(idx), EVAL_CHUNK):
        sl = slice(s, s + EVAL_CHUNK)
        visual, _ = _visual_batch(ckpt, bank, idx[sl], experts[sl], keep_cache=False)
        seqs = [dec.assemble(v, [], t) for v, t in zip(visual, ids[sl])]
        out[sl] = dec.per_sequence_loss(ckpt.decoder, ckpt.decoder_cfg, dec.collate(seqs))
    return out


def domain_losses(ckpt: Checkpoint, bank: FeatureBank, experts: np.ndarray) -> list[float]:
    labels = bank.split.labels
    losses = sequence_losses(ckpt, bank, np.arange(len(labels)), experts)
    return [float(losses[labels == d].mean()) for d in range(ckpt.n_experts)]


def exact_matches(ckpt: Checkpoint, bank: FeatureBank, idx: np.ndarray, experts: np.ndarray) -> np.ndarray:
    """Whether greedy generation reproduces each caption exactly."""
    hits = np.zeros(len(idx), dtype=bool)
    for s in range(0, len(idx), EVAL_CHUNK):
        sl = slice(s, s + EVAL_CHUNK)
        visual, _ = _visual_batch(ckpt, bank, idx[sl], experts[sl], keep_cache=False)
        gens = dec.generate_batch(ckpt.decoder, ckpt.decoder_cfg, visual, [[]] * len(visual), MAX_CAPTION)
        for j, (g, i) in enumerate(zip(gens, idx[sl])):
            hits[s + j] = g.ids == ckpt.vocab.encode(bank.split.captions[i])
    return hits


def parse_policy(policy: str) -> tuple[str, int | None]:
    if policy in {"learned", "oracle", "random"}:
        return policy, None
    kind, _, arg = policy.partition(":")
    if kind == "fixed" and arg.isdigit():
        return kind, int(arg)
    raise ConfigurationError(f"unknown routing policy {policy!r}; use learned, oracle, random or fixed:i")


def policy_routes(ckpt: Checkpoint, bank: FeatureBank, policy: str, seed: int = 0) -> np.ndarray:
    kind, arg = parse_policy(policy)
    n = len(bank.split)
    if kind == "learned":
        return bank.routes(ckpt.router)
    if kind == "oracle":
        return bank.split.labels.astype(np.int64)
    if kind == "random":
        return np.random.default_rng(seed).integers(0, ckpt.n_experts, size=n)
    if arg >= ckpt.n_experts:
        raise ConfigurationError(f"fixed:{arg} outside 0..{ckpt.n_experts - 1}")
    return np.full(n, arg, dtype=np.int64)


@dataclass
class DomainStats:
    domain: int
    name: str
    samples: int
    routing_accuracy: float
    loss: float
    exact_match: float


@dataclass
class EvalReport:
    policy: str
    domains: list[DomainStats]
    confusion: np.ndarray  # (N, N): rows true domain, columns chosen expert
    token_counts: list[int]

    def to_text(self) -> str:
        lines = [f"policy = {self.policy}"]
        for d in self.domains:
            p = f"domain.{d.domain}"
            lines += [f"{p}.name = {d.name}", f"{p}.samples = {d.samples}",
                      f"{p}.routing_accuracy = {d.routing_accuracy:.6f}",
                      f"{p}.loss = {d.loss:.6f}", f"{p}.exact_match = {d.exact_match:.6f}"]
        lines += [f"tokens.{i} = {t}" for i, t in enumerate(self.token_counts)]
        for i, row in enumerate(self.confusion):
            lines.append(f"confusion.{i} = " + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"

    def confusion_csv(self) -> str:
        n = len(self.confusion)
        head = "domain," + ",".join(f"expert_{j}" for j in range(n))
        rows = [f"{i}," + ",".join(str(int(v)) for v in row) for i, row in enumerate(self.confusion)]
        return "\n".join([head, *rows]) + "\n"

    def table(self) -> str:
        out = [f"{'domain':<10}{'n':>6}{'route_acc':>11}{'loss':>10}{'exact':>8}{'tokens':>8}"]
        for d in self.domains:
            out.append(f"{d.name:<10}{d.samples:>6}{d.routing_accuracy:>11.4f}{d.loss:>10.4f}"
                       f"{d.exact_match:>8.4f}{self.token_counts[d.domain]:>8}")
        return "\n".join(out)

    def off_diagonal_fraction(self) -> float:
        total = self.confusion.sum()
        return float((total - np.trace(self.confusion)) / total) if total else 0.0


def token_counts(specs: list[vi.EncoderSpec]) -> list[int]:
    return [s.tokens for s in sorted(specs, key=lambda s: s.expert)]


def ablate(ckpt: Checkpoint, split: sd.Split, policy: str = "learned", seed: int = 0,
           bank: FeatureBank | None = None, exact: bool = True) -> EvalReport:
    """Per-domain loss and exact match on ``split`` under a routing policy."""
    bank = bank or FeatureBank(ckpt, split)
    experts = policy_routes(ckpt, bank, policy, seed)
    labels = split.labels
    n = ckpt.n_experts
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (labels, experts), 1)
    all_idx = np.arange(len(labels))
    losses = sequence_losses(ckpt, bank, all_idx, experts)
    hits = exact_matches(ckpt, bank, all_idx, experts) if exact else np.zeros(len(labels), dtype=bool)
    domains = []
    for d in range(n):
        rows = labels == d
        count = int(rows.sum())
        domains.append(DomainStats(
            d, vi.EXPERT_NAMES[d] if d < len(vi.EXPERT_NAMES) else str(d), count,
            float(np.mean(experts[rows] == d)) if count else 0.0,
            float(losses[rows].mean()) if count else float("nan"),
            float(hits[rows].mean()) if count and exact else float("nan"),
        ))
    return EvalReport(policy, domains, confusion, token_counts(ckpt.specs))


# ---------------------------------------------------------------------------
# Whole run
# ---------------------------------------------------------------------------


def run_all(run: RunConfig, data: sd.Dataset, ckpt: Checkpoint | None = None) -> dict[str, StageResult]:
    """init -> router -> pretrain -> finetune with shared feature banks."""
    ckpt = ckpt or init_checkpoint(run)
    train_bank = FeatureBank(ckpt, data.train)
    heldout_bank = FeatureBank(ckpt, data.heldout)
    s1 = run_stage1(ckpt, data, run.stage("router"), run.metrics_timing, train_bank, heldout_bank)
    s2 = run_stage2(s1.checkpoint, data, run.stage("pretrain"), run.stage2_train_embedding,
                    run.router_trainable_in_stage2, run.metrics_timing, train_bank, heldout_bank,
                    run.route_override)
    s3 = run_stage3(s2.checkpoint, data, run.stage("finetune"), run.metrics_timing, train_bank, heldout_bank,
                    run.route_override)
    return {"init": StageResult(ckpt, []), "router": s1, "pretrain": s2, "finetune": s3}
