"""Experiment orchestration: config, training loop, checkpoints, reports.

A run is reproducible from its config alone: weights, per-epoch data
order, patch draws and KID subsets are all keyed off the run seed (and
epoch/step indices), never off live RNG state. Checkpoints are written
at epoch boundaries as an atomic text-header + binary-array container,
so an interrupted run resumed from disk is bit-identical to an
uninterrupted one.

Config files are flat ``key = value`` text; every key can also be set
by a CLI flag of the same name.

Checkpoint container layout (all integers little-endian):
  line "PHASEGAN-CKPT v1"
  header lines: "digest <hex>", "epoch <int>", "gen_step <int>",
                "disc_step <int>", "seed <int>", "arrays <count>"
  line "---", then per array (sorted by name):
  u32 name length, name bytes, u32 ndim, u32 per dim, u32 value count,
  float32 values.
"""

import hashlib
import os
from collections import OrderedDict
from dataclasses import dataclass, fields

import numpy as np

from . import losses as L
from . import metrics as M
from . import schedule as S
from .autodiff import Tape, Tensor
from .errors import ConfigError, FormatError, PhaseganError, TrainingAborted
from .models import ArchConfig, build_models
from .optim import Adam
from .synthdata import (
    DatasetConfig,
    build_dataset,
    combine_seed,
    load_dataset,
    write_image,
)

CKPT_MAGIC = "PHASEGAN-CKPT v1"

_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False}


@dataclass
class RunConfig:
    kind: str = "cut"
    image_size: int = 32
    base_width: int = 32
    res_blocks: int = 2
    embed_dim: int = 256
    num_train: int = 200
    num_test: int = 40
    categories: int = 5
    data_seed: int = 0
    data_dir: str = ""
    seed: int = 0
    epochs: int = 100
    chunks: int = 0
    chunk_epochs: int = 10
    preset: str = ""
    lr_divisor: float = 1.0
    base_lr: float = 0.002
    batch_size: int = 2
    lambda_cycle: float = 10.0
    lambda_nce: float = 1.0
    nce_temperature: float = 0.07
    num_patches: int = 64
    identity_nce: bool = True
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reset_moments_on_phase: bool = False
    eval_every: int = 10
    kid_subsets: int = 10
    kid_subset_size: int = 0
    embedder_dim: int = 64
    embedder_seed: int = 0
    run_id: str = "run"
    out_dir: str = "runs/run"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be positive")
        if self.preset and self.epochs != 100:
            raise ConfigError("presets define 100-epoch schedules; set epochs = 100")

    # -- schedule ---------------------------------------------------------
    def plan(self):
        if self.preset:
            return S.preset_plan(self.preset, self.base_lr, self.lr_divisor)
        spec = S.ScheduleSpec(
            self.epochs, self.chunks, self.chunk_epochs, self.lr_divisor, self.base_lr
        )
        return S.build_plan(spec)

    def ratio_name(self):
        if self.preset:
            return self.preset
        sem = self.chunks * self.chunk_epochs
        return f"{self.epochs - sem}:{sem}"

    # -- sub-configs ------------------------------------------------------
    def arch(self):
        return ArchConfig(
            kind=self.kind,
            image_size=self.image_size,
            base_width=self.base_width,
            res_blocks=self.res_blocks,
            embed_dim=self.embed_dim,
        )

    def dataset(self):
        return DatasetConfig(
            num_train=self.num_train,
            num_test=self.num_test,
            image_size=self.image_size,
            categories=self.categories,
            seed=self.data_seed,
        )

    def loss_weights(self):
        return L.LossWeights(
            lambda_cycle=self.lambda_cycle,
            lambda_nce=self.lambda_nce,
            nce_temperature=self.nce_temperature,
            num_patches=self.num_patches,
            identity_nce=self.identity_nce,
        )

    # -- serialization ----------------------------------------------------
    def to_text(self):
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self):
        """Config hash covering everything except the output location."""
        lines = sorted(
            line for line in self.to_text().splitlines() if not line.startswith("out_dir")
        )
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def _parse_value(name, text, target_type):
    text = text.strip()
    try:
        if target_type is bool:
            return _BOOL_STRINGS[text.lower()]
        return target_type(text)
    except (KeyError, ValueError):
        raise ConfigError(f"bad value for '{name}': {text!r}") from None


def _config_schema():
    by_name = {"str": str, "int": int, "float": float, "bool": bool}
    return {
        f.name: by_name[f.type] if isinstance(f.type, str) else f.type
        for f in fields(RunConfig)
    }


def parse_config(text, overrides=None):
    """Flat key = value text (with # comments) into a RunConfig."""
    schema = _config_schema()
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown config key '{key}'")
        values[key] = _parse_value(key, value, schema[key])
    for key, value in (overrides or {}).items():
        if key not in schema:
            raise ConfigError(f"unknown config key '{key}'")
        if isinstance(value, str):
            value = _parse_value(key, value, schema[key])
        values[key] = value
    return RunConfig(**values)


def load_config(path, overrides=None):
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


# ---------------------------------------------------------------------------
# checkpoint container


def _gather_arrays(models, opt_g, opt_d):
    arrays = OrderedDict()
    for name, p in models.named_params().items():
        arrays[f"param.{name}"] = p.data
    for prefix, opt in (("g", opt_g), ("d", opt_d)):
        for name, m in opt.m.items():
            arrays[f"m_{prefix}.{name}"] = m
        for name, v in opt.v.items():
            arrays[f"v_{prefix}.{name}"] = v
    return arrays


def write_checkpoint(path, digest, epoch, models, opt_g, opt_d, seed):
    arrays = _gather_arrays(models, opt_g, opt_d)
    header = (
        f"{CKPT_MAGIC}\n"
        f"digest {digest}\n"
        f"epoch {epoch}\n"
        f"gen_step {opt_g.t}\n"
        f"disc_step {opt_d.t}\n"
        f"seed {seed}\n"
        f"arrays {len(arrays)}\n"
        "---\n"
    )
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(header.encode())
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f4")
            encoded = name.encode()
            fh.write(np.uint32(len(encoded)).astype("<u4").tobytes())
            fh.write(encoded)
            fh.write(np.uint32(arr.ndim).astype("<u4").tobytes())
            fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
            fh.write(np.uint32(arr.size).astype("<u4").tobytes())
            fh.write(arr.tobytes())
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"---\n")
    if not data.startswith(CKPT_MAGIC.encode()) or end < 0:
        raise FormatError(f"not a checkpoint file: {path}", offset=0)
    header = {}
    for line in data[:end].decode().splitlines()[1:]:
        key, _, value = line.partition(" ")
        header[key] = value
    pos = end + 4
    arrays = {}

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("checkpoint truncated", offset=len(data))
        chunk = data[pos : pos + n]
        pos += n
        return chunk

    def u32():
        return int(np.frombuffer(take(4), dtype="<u4")[0])

    for _ in range(int(header["arrays"])):
        name = take(u32()).decode()
        shape = tuple(u32() for _ in range(u32()))
        count = u32()
        values = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        arrays[name] = values.copy()
    if pos != len(data):
        raise FormatError("trailing bytes after arrays", offset=pos)
    return header, arrays


def _restore_state(models, opt_g, opt_d, header, arrays):
    params = models.named_params()
    expected = set(_gather_arrays(models, opt_g, opt_d))
    if expected != set(arrays):
        raise FormatError("checkpoint arrays do not match the model layout")
    for name, p in params.items():
        p.data = arrays[f"param.{name}"].copy()
    for prefix, opt in (("g", opt_g), ("d", opt_d)):
        for name in opt.m:
            opt.m[name] = arrays[f"m_{prefix}.{name}"].copy()
            opt.v[name] = arrays[f"v_{prefix}.{name}"].copy()
    opt_g.t = int(header["gen_step"])
    opt_d.t = int(header["disc_step"])


# ---------------------------------------------------------------------------
# training steps

CUT_COMPONENTS = ("adv", "nce", "nce_idt", "total_g", "d")
CUT_COMPONENTS_NO_IDT = ("adv", "nce", "total_g", "d")
CYCLEGAN_COMPONENTS = ("adv_a", "adv_b", "cycle_a", "cycle_b", "total_g", "d_a", "d_b")


def _component_names(config):
    if config.kind == "cyclegan":
        return CYCLEGAN_COMPONENTS
    return CUT_COMPONENTS if config.identity_nce else CUT_COMPONENTS_NO_IDT


def _nce_over_taps(query_feats, key_feats, temperature):
    total = L.patch_nce_loss(query_feats[0], key_feats[0], temperature)
    for q, k in zip(query_feats[1:], key_feats[1:]):
        total = total + L.patch_nce_loss(q, k, temperature)
    return total * (1.0 / len(query_feats))


def _cut_step(models, opt_g, opt_d, src, tgt, weights, patch_rng):
    g = models.generators["g"]
    d = models.discriminators["d"]
    f = models.encoder
    batch = src.data.shape[0]
    with Tape() as tape:
        fake = g(src)
        idx = f.sample_patch_indices(batch, weights.num_patches, patch_rng)
        query = f.extract_patch_features(fake, idx)
        keys = f.extract_patch_features(src, idx)
        parts = {
            "adv": L.adversarial_loss(d(fake), True),
            "nce": _nce_over_taps(query, keys, weights.nce_temperature),
        }
        if weights.identity_nce:
            idt = g(tgt)
            q_idt = f.extract_patch_features(idt, idx)
            k_idt = f.extract_patch_features(tgt, idx)
            parts["nce_idt"] = _nce_over_taps(q_idt, k_idt, weights.nce_temperature)
        components, total_g = L.compose_total_loss("cut", parts, weights)
        opt_g.zero_grad()
        opt_d.zero_grad()
        tape.backward(total_g)
    opt_g.step()

    with Tape() as tape:
        d_loss = L.discriminator_loss(d(tgt), d(fake.detach()))
        opt_d.zero_grad()
        tape.backward(d_loss)
    opt_d.step()

    out = {name: comp.item() for name, comp in components.items()}
    out["total_g"] = total_g.item()
    out["d"] = d_loss.item()
    return out


def _cyclegan_step(models, opt_g, opt_d, a, b, weights, patch_rng):
    g_a, g_b = models.generators["g_a"], models.generators["g_b"]
    d_a, d_b = models.discriminators["d_a"], models.discriminators["d_b"]
    with Tape() as tape:
        fake_b = g_a(a)
        fake_a = g_b(b)
        parts = {
            "adv_a": L.adversarial_loss(d_b(fake_b), True),
            "adv_b": L.adversarial_loss(d_a(fake_a), True),
            "cycle_a": L.cycle_loss(a, g_b(fake_b)),
            "cycle_b": L.cycle_loss(b, g_a(fake_a)),
        }
        components, total_g = L.compose_total_loss("cyclegan", parts, weights)
        opt_g.zero_grad()
        opt_d.zero_grad()
        tape.backward(total_g)
    opt_g.step()

    with Tape() as tape:
        loss_a = L.discriminator_loss(d_a(a), d_a(fake_a.detach()))
        loss_b = L.discriminator_loss(d_b(b), d_b(fake_b.detach()))
        d_total = loss_a + loss_b
        opt_d.zero_grad()
        tape.backward(d_total)
    opt_d.step()

    out = {name: comp.item() for name, comp in components.items()}
    out["total_g"] = total_g.item()
    out["d_a"] = loss_a.item()
    out["d_b"] = loss_b.item()
    return out


# ---------------------------------------------------------------------------
# the run


class Run:
    """Live state of one training run rooted at config.out_dir."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.plan = config.plan()
        self.cursor = list(S.epoch_cursor(self.plan))
        self.train_data, self.test_data = self._load_data()
        self.models = build_models(config.arch(), seed=combine_seed(config.seed, "init"))
        opt_kw = dict(beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
        self.opt_g = Adam(self.models.generator_params(), config.base_lr, **opt_kw)
        self.opt_d = Adam(self.models.discriminator_params(), config.base_lr, **opt_kw)
        self.embedder = M.RandomProjectionEmbedder(
            dim=config.embedder_dim, seed=config.embedder_seed
        )
        self.start_epoch = 0
        self.best = None  # (ssim_percent, MetricReport)

    def _load_data(self):
        if self.config.data_dir:
            return load_dataset(self.config.data_dir)
        return build_dataset(self.config.dataset())

    # -- paths ------------------------------------------------------------
    def path(self, name):
        return os.path.join(self.config.out_dir, name)

    def _prepare_dir(self):
        os.makedirs(self.path("samples"), exist_ok=True)
        with open(self.path("config.cfg"), "w") as fh:
            fh.write(self.config.to_text())
            fh.write(f"# plan = {S.serialize_plan(self.plan)}\n")
        if not os.path.exists(self.path("metrics.csv")):
            with open(self.path("metrics.csv"), "w") as fh:
                fh.write(M.CSV_HEADER + "\n")
        if not os.path.exists(self.path("train_log.tsv")):
            with open(self.path("train_log.tsv"), "w") as fh:
                names = "\t".join(_component_names(self.config))
                fh.write(f"epoch\tkind\tlr\t{names}\n")

    # -- evaluation -------------------------------------------------------
    def translate_test_sources(self):
        gen = self.models.generators["g" if self.config.kind == "cut" else "g_a"]
        out = []
        bs = max(1, self.config.batch_size)
        for i in range(0, len(self.test_data), bs):
            chunk = self.test_data[i : i + bs]
            batch = Tensor(np.stack([item.source for item in chunk]))
            out.extend(gen(batch).data.copy())
        return out

    def evaluate(self, label, identity=False):
        targets = [item.target for item in self.test_data]
        generated = [t.copy() for t in targets] if identity else self.translate_test_sources()
        cfg = self.config
        report = M.evaluate_run(
            generated,
            targets,
            self.embedder,
            run_id=f"{cfg.run_id}:{label}",
            ratio=cfg.ratio_name(),
            lr_setting=f"{cfg.lr_divisor:g}",
            kid_subsets=cfg.kid_subsets,
            kid_subset_size=cfg.kid_subset_size or None,
            seed=combine_seed(cfg.seed, "kid"),
        )
        with open(self.path("metrics.csv"), "a") as fh:
            fh.write(report.to_csv_row() + "\n")
        for i in range(min(4, len(generated))):
            write_image(self.path(f"samples/{label}_{i}.ppm"), generated[i])
        if self.best is None or report.ssim_percent > self.best.ssim_percent:
            self.best = report
        return report

    # -- checkpointing ----------------------------------------------------
    def save_checkpoint(self, name, epoch):
        write_checkpoint(
            self.path(name),
            self.config.digest(),
            epoch,
            self.models,
            self.opt_g,
            self.opt_d,
            self.config.seed,
        )

    def restore(self, checkpoint_path):
        header, arrays = read_checkpoint(checkpoint_path)
        if header["digest"] != self.config.digest():
            raise ConfigError(
                "checkpoint digest does not match the supplied config; "
                "refusing to resume with changed settings"
            )
        _restore_state(self.models, self.opt_g, self.opt_d, header, arrays)
        self.start_epoch = int(header["epoch"])

    # -- the loop ---------------------------------------------------------
    def _batches(self, epoch):
        order_rng = np.random.default_rng(combine_seed(self.config.seed, "order", epoch))
        perm = order_rng.permutation(len(self.train_data))
        bs = self.config.batch_size
        for i in range(0, len(perm), bs):
            yield [self.train_data[j] for j in perm[i : i + bs]]

    def _epoch(self, epoch, kind, step_fn, weights):
        sums = {}
        steps = 0
        for step, items in enumerate(self._batches(epoch)):
            src = Tensor(np.stack([item.source for item in items]))
            if kind == S.ORIGINAL:
                tgt = Tensor(np.stack([item.target for item in items]))
            else:
                tgt = Tensor(np.stack([item.semantic for item in items]))
            patch_rng = np.random.default_rng(
                combine_seed(self.config.seed, "patch", epoch, step)
            )
            comps = step_fn(
                self.models, self.opt_g, self.opt_d, src, tgt, weights, patch_rng
            )
            if not all(np.isfinite(v) for v in comps.values()):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} step {step}; "
                    "last good checkpoint retained"
                )
            for name, value in comps.items():
                sums[name] = sums.get(name, 0.0) + value
            steps += 1
        return {name: value / steps for name, value in sums.items()}

    def train(self, stop_after=None):
        """Run the plan (optionally only ``stop_after`` epochs of it)."""
        cfg = self.config
        self._prepare_dir()
        weights = cfg.loss_weights()
        step_fn = _cyclegan_step if cfg.kind == "cyclegan" else _cut_step
        names = _component_names(cfg)
        if self.start_epoch == 0:
            self.evaluate("init")
            self.save_checkpoint("checkpoint_latest.bin", 0)
        executed = 0
        prev_kind = self.cursor[self.start_epoch - 1][1] if self.start_epoch else None
        for epoch, kind, lr in self.cursor[self.start_epoch :]:
            if stop_after is not None and executed >= stop_after:
                return None
            reset = cfg.reset_moments_on_phase and prev_kind not in (None, kind)
            self.opt_g.set_lr(lr, reset_moments=reset)
            self.opt_d.set_lr(lr, reset_moments=reset)
            means = self._epoch(epoch, kind, step_fn, weights)
            with open(self.path("train_log.tsv"), "a") as fh:
                cols = "\t".join(repr(means[n]) for n in names)
                fh.write(f"{epoch}\t{kind}\t{lr!r}\t{cols}\n")
            last = epoch == cfg.epochs - 1
            boundary = not last and self.cursor[epoch + 1][1] != kind
            if (epoch + 1) % cfg.eval_every == 0 or boundary:
                if not last:
                    self.evaluate(f"ep{epoch}")
            self.save_checkpoint("checkpoint_latest.bin", epoch + 1)
            prev_kind = kind
            executed += 1
        final = self.evaluate("final")
        best = self.best
        with open(self.path("metrics.csv"), "a") as fh:
            relabeled = M.MetricReport(
                run_id=f"{cfg.run_id}:best",
                ssim_percent=best.ssim_percent,
                fid=best.fid,
                kid_mean=best.kid_mean,
                kid_variance=best.kid_variance,
                n_images=best.n_images,
                embedder=best.embedder,
                ratio=best.ratio,
                lr_setting=best.lr_setting,
            )
            fh.write(relabeled.to_csv_row() + "\n")
        self.save_checkpoint("checkpoint_final.bin", cfg.epochs)
        return final


def train(config: RunConfig, stop_after=None):
    """Train from scratch; returns the final MetricReport (None if stopped)."""
    run = Run(config)
    return run.train(stop_after=stop_after)


def resume(checkpoint_path, config: RunConfig = None, stop_after=None):
    """Continue a run from an epoch-boundary checkpoint, bit-identically."""
    if config is None:
        config = load_config(os.path.join(os.path.dirname(checkpoint_path), "config.cfg"))
    run = Run(config)
    run.restore(checkpoint_path)
    return run.train(stop_after=stop_after)


def evaluate(checkpoint_path, config: RunConfig = None, identity=False):
    """Score a checkpoint's generator on the test split.

    ``identity=True`` is the debug mode that feeds targets straight
    through instead of translating sources (no checkpoint required).
    """
    if config is None:
        config = load_config(os.path.join(os.path.dirname(checkpoint_path), "config.cfg"))
    run = Run(config)
    run._prepare_dir()
    if not identity:
        run.restore(checkpoint_path)
        label = f"eval{run.start_epoch}"
    else:
        label = "identity"
    return run.evaluate(label, identity=identity)


def sweep(config: RunConfig, ratios, lr_divisors):
    """One run per (ratio, l) pair; aggregate rows into sweep.csv.

    Failing runs are recorded in sweep_status.tsv and the sweep moves
    on. Returns the list of (ratio, l, MetricReport-or-None).
    """
    if not ratios or not lr_divisors:
        raise ConfigError("sweep needs at least one ratio and one lr divisor")
    os.makedirs(config.out_dir, exist_ok=True)
    csv_path = os.path.join(config.out_dir, "sweep.csv")
    status_path = os.path.join(config.out_dir, "sweep_status.tsv")
    results = []
    with open(csv_path, "w") as csv_fh, open(status_path, "w") as status_fh:
        csv_fh.write(M.CSV_HEADER + "\n")
        status_fh.write("run_id\tstatus\tdetail\n")
        for ratio_name in ratios:
            for l in lr_divisors:
                run_id = f"{ratio_name.replace(':', '-')}-l{l:g}"
                sub = parse_config(
                    config.to_text(),
                    overrides={
                        "preset": ratio_name,
                        "lr_divisor": str(l),
                        "run_id": run_id,
                        "out_dir": os.path.join(config.out_dir, run_id),
                    },
                )
                try:
                    report = train(sub)
                except PhaseganError as err:
                    status_fh.write(f"{run_id}\tfailed\t{err}\n")
                    results.append((ratio_name, l, None))
                    continue
                csv_fh.write(report.to_csv_row() + "\n")
                csv_fh.flush()
                status_fh.write(f"{run_id}\tok\t\n")
                results.append((ratio_name, l, report))
    return results
