"""Experiment orchestration for the two-stage training scheme.

Stage one trains a light model on small patches centered on annotated
voxels.  Stage two propagates it over whole volumes with sliding windows,
initializes pseudo labels, and self-trains a global model with gated
pseudo-label updates; an optional prototype head is fitted at the end and
fused into test-time predictions.  Every round is checkpointed so a killed
run resumes bit-exactly.
"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fpa import (FUSION_POLICIES, Prototype, fine_tune, fuse_at_test,
                  init_prototype, labeled_embeddings, similarity_map)
from .lpu import (PseudoLabelState, init_pseudo, read_eta_csv, try_update,
                  write_eta_csv)
from .metrics import evaluate
from .nnkit import (FeatureMap, ModelSpec, NumericalError, ParamEntry,
                    ParamStore, SegModel, adam_step, load_checkpoint,
                    loss_seg, save_checkpoint)
from .phantom import (CenterlineTree, PhantomSpec, generate_phantom,
                      read_tree, synthesize_pva, write_tree)
from .volgrid import (ConfigError, PvaLabel, ValidationError, Volume,
                      binarize, read_volume, write_volume)

ABLATION_ROWS = ("baseline", "pli", "pli_plu", "pli_plu_fpa")
UNLABELED_MODES = ("background", "ignore")


def _triple(v, what: str) -> tuple[int, int, int]:
    t = tuple(int(x) for x in v)
    if len(t) != 3 or any(x < 1 for x in t):
        raise ConfigError(f"{what} must be three positive ints, got {v!r}")
    return t


def _widths(v, what: str) -> tuple[int, ...]:
    t = tuple(int(x) for x in v)
    if not t or any(x < 1 for x in t):
        raise ConfigError(f"{what} must be a nonempty tuple of positive "
                          f"ints, got {v!r}")
    return t


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run depends on, JSON round-trippable."""

    data_dir: str
    out_dir: str
    patch_size_sl: tuple = (16, 16, 16)
    patch_size_sg: tuple = (32, 32, 32)
    widths_sl: tuple = (4, 4, 4)
    widths_sg: tuple = (8, 8, 8)
    lr: float = 1e-4
    sl_epochs: int = 40
    sl_patches_per_volume: int = 4
    sg_patches_per_volume: int = 2
    warmup_epochs: int = 20
    self_training_rounds: int = 5
    epochs_per_round: int = 10
    use_pli: bool = True
    use_plu: bool = True
    use_fpa: bool = True
    fusion: str = "max"
    sl_unlabeled: str = "background"
    fpa_steps: int = 200
    fpa_lr: float = 0.1
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "patch_size_sl",
                           _triple(self.patch_size_sl, "patch_size_sl"))
        object.__setattr__(self, "patch_size_sg",
                           _triple(self.patch_size_sg, "patch_size_sg"))
        object.__setattr__(self, "widths_sl",
                           _widths(self.widths_sl, "widths_sl"))
        object.__setattr__(self, "widths_sg",
                           _widths(self.widths_sg, "widths_sg"))
        for name in ("sl_epochs", "sl_patches_per_volume",
                     "sg_patches_per_volume", "warmup_epochs",
                     "self_training_rounds", "epochs_per_round", "fpa_steps"):
            if int(getattr(self, name)) < 0:
                raise ConfigError(f"{name} must be >= 0")
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (self.lr > 0 and self.fpa_lr > 0):
            raise ConfigError("learning rates must be positive")
        if self.fusion not in FUSION_POLICIES:
            raise ConfigError(f"unknown fusion policy {self.fusion!r}")
        if self.sl_unlabeled not in UNLABELED_MODES:
            raise ConfigError(
                f"sl_unlabeled must be one of {UNLABELED_MODES}")
        object.__setattr__(self, "rng_seed", int(self.rng_seed))

    def to_json_dict(self) -> dict:
        d = {}
        for name in self.__dataclass_fields__:
            v = getattr(self, name)
            d[name] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        for req in ("data_dir", "out_dir"):
            if req not in d:
                raise ConfigError(f"config is missing required key {req!r}")
        return cls(**d)


def canonical_config_json(config: ExperimentConfig) -> str:
    return json.dumps(config.to_json_dict(), sort_keys=True, indent=1)


@dataclass
class TrainRecord:
    """Loss curves, gate outcomes and artifact paths for one run.

    Epoch numbering is global and monotone by construction: add_epoch
    assigns the next index itself.
    """

    epochs: list = field(default_factory=list)
    rounds: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    wall_clock_s: float = 0.0

    def add_epoch(self, phase: str, loss: float):
        self.epochs.append({"epoch": len(self.epochs), "phase": phase,
                            "loss": float(loss)})

    def add_round(self, round_idx: int, eta_by_volume: dict):
        self.rounds.append({"round": int(round_idx), "eta": eta_by_volume})

    def add_checkpoint(self, rel_path: str):
        self.checkpoints.append(str(rel_path))

    def to_json_dict(self) -> dict:
        return {"epochs": self.epochs, "rounds": self.rounds,
                "checkpoints": self.checkpoints,
                "wall_clock_s": self.wall_clock_s}


# ------------------------------------------------------------------ dataset

@dataclass(frozen=True)
class Subject:
    sid: str
    image: Volume
    gt: Volume
    pva: PvaLabel
    tree: CenterlineTree


def _derived_seed(*key) -> int:
    return int(np.random.default_rng(key).integers(2 ** 63))


def build_phantom_dataset(out_dir, n: int, fraction: float, rng_seed: int,
                          spec: PhantomSpec | None = None) -> dict:
    """Generate n phantom subjects with partial annotations into a directory.

    The first ceil(2n/3) subjects form the training split.  Returns the
    manifest that was written.
    """
    if n < 1:
        raise ConfigError("dataset needs at least one subject")
    base = spec if spec is not None else PhantomSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sids = [f"subj_{i:03d}" for i in range(n)]
    achieved = {}
    for i, sid in enumerate(sids):
        sp = replace(base, rng_seed=_derived_seed(rng_seed, 101, i))
        image, gt, tree = generate_phantom(sp)
        pva = synthesize_pva(gt, tree, fraction,
                             rng_seed=_derived_seed(rng_seed, 102, i))
        sub_dir = out / sid
        sub_dir.mkdir(exist_ok=True)
        write_volume(image, sub_dir / "image.vvol")
        write_volume(gt, sub_dir / "gt.vvol")
        write_volume(pva.mask, sub_dir / "pva.vvol")
        write_tree(tree, sub_dir / "tree.json")
        achieved[sid] = pva.labeled_fraction
    n_train = int(np.ceil(2 * n / 3))
    manifest = {"subjects": sids, "train": sids[:n_train],
                "test": sids[n_train:], "labeled_fraction": fraction,
                "rng_seed": int(rng_seed), "achieved": achieved}
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
    return manifest


def load_dataset(data_dir):
    """Read a dataset directory back: ({sid: Subject}, train_ids, test_ids)."""
    base = Path(data_dir)
    man_path = base / "manifest.json"
    if not man_path.exists():
        raise ValidationError(f"{base}: no manifest.json; not a dataset")
    manifest = json.loads(man_path.read_text())
    target = float(manifest["labeled_fraction"])
    subjects = {}
    for sid in manifest["subjects"]:
        sub_dir = base / sid
        image = read_volume(sub_dir / "image.vvol")
        gt = read_volume(sub_dir / "gt.vvol")
        pva_mask = read_volume(sub_dir / "pva.vvol")
        tree = read_tree(sub_dir / "tree.json")
        frac = float(pva_mask.data.sum() / max(1, gt.data.sum()))
        pva = PvaLabel(mask=pva_mask, labeled_fraction=frac,
                       target_met=abs(frac - target) <= 0.02)
        subjects[sid] = Subject(sid=sid, image=image, gt=gt, pva=pva,
                                tree=tree)
    return subjects, list(manifest["train"]), list(manifest["test"])


# ----------------------------------------------------------- patch sampling

def sample_labeled_patches(image: Volume, pva: PvaLabel, patch_size,
                           n: int, rng) -> list:
    """Draw n patches whose centers are uniform over annotated voxels.

    Patches near the border are shifted inward so they stay inside the
    volume; the sampled voxel always remains inside its patch, so every
    label patch carries at least one annotated voxel.
    """
    p = np.asarray(_triple(patch_size, "patch size"))
    dims = np.asarray(image.dims)
    if (p > dims).any():
        raise ConfigError(f"patch {tuple(p)} exceeds volume dims "
                          f"{image.dims}")
    coords = np.argwhere(pva.mask.data == 1)
    out = []
    for _ in range(int(n)):
        c = coords[rng.integers(len(coords))]
        start = np.clip(c - p // 2, 0, dims - p)
        sl = tuple(slice(int(s), int(s + k)) for s, k in zip(start, p))
        out.append((image.data[sl].astype(np.float32),
                    pva.mask.data[sl].copy()))
    return out


def _uniform_patch(image: Volume, target: np.ndarray, patch_size, rng):
    p = np.asarray(patch_size)
    dims = np.asarray(image.dims)
    start = rng.integers(0, dims - p + 1)
    sl = tuple(slice(int(s), int(s + k)) for s, k in zip(start, p))
    return image.data[sl].astype(np.float32), target[sl]


# ----------------------------------------------------------------- training

def _copy_store(store: ParamStore) -> ParamStore:
    out = ParamStore()
    out.step_count = store.step_count
    for name, e in store.entries.items():
        out.entries[name] = ParamEntry(
            values=e.values.copy(), grad=e.grad.copy(), shape=e.shape,
            m=e.m.copy(), v=e.v.copy(), trainable=e.trainable)
    return out


def _abort_with_checkpoint(config, snapshot: ParamStore, name: str,
                           cause: Exception):
    ckpt_dir = Path(config.out_dir) / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    path = ckpt_dir / name
    save_checkpoint(path, snapshot)
    raise NumericalError(
        f"training diverged ({cause}); last finite state saved to "
        f"{path}") from cause


def _train_step(model: SegModel, img_patch, target, weights, lr: float):
    pred, _ = model.forward_array(img_patch, train=True)
    loss, grad = loss_seg(pred, target, weights)
    if not np.isfinite(loss):
        raise NumericalError("loss is not finite")
    model.backward(grad)
    adam_step(model.store, lr)
    model.zero_grads()
    return loss


def train_sl(config: ExperimentConfig, subjects=None,
             record: TrainRecord | None = None) -> ParamStore:
    """Patch-wise training of the light model on annotated neighborhoods."""
    if subjects is None:
        data, train_ids, _ = load_dataset(config.data_dir)
        subjects = [data[s] for s in train_ids]
    if record is None:
        record = TrainRecord()
    model = SegModel(ModelSpec(widths=config.widths_sl, role="S_l"),
                     rng=np.random.default_rng((config.rng_seed, 1)))
    for e in range(config.sl_epochs):
        rng = np.random.default_rng((config.rng_seed, 2, e))
        losses = []
        for sub in subjects:
            patches = sample_labeled_patches(
                sub.image, sub.pva, config.patch_size_sl,
                config.sl_patches_per_volume, rng)
            for img_p, lbl_p in patches:
                target = lbl_p.astype(np.float32)
                # unlabeled in-patch voxels: background by default, or
                # dropped from the loss entirely in "ignore" mode
                weights = None if config.sl_unlabeled == "background" \
                    else target
                try:
                    losses.append(_train_step(model, img_p, target,
                                              weights, config.lr))
                except NumericalError as exc:
                    # the step raises before touching parameters, so the
                    # store still holds the last finite state
                    _abort_with_checkpoint(config, _copy_store(model.store),
                                           "sl_abort.ckpt", exc)
        record.add_epoch("sl", float(np.mean(losses)) if losses else 0.0)
    return model.store


# ---------------------------------------------------------------- inference

def _window_starts(dim: int, p: int) -> list[int]:
    step = max(1, p // 2)
    starts = list(range(0, dim - p + 1, step))
    if starts[-1] != dim - p:
        starts.append(dim - p)
    return starts


def sliding_window_infer(model: SegModel, image: Volume, patch_size):
    """Tile the volume with half-window strides and average the overlaps.

    Both the logits and the penultimate features are assembled this way, so
    downstream consumers see one consistent field each.
    """
    p = _triple(patch_size, "patch size")
    dims = image.dims
    if any(pp > d for pp, d in zip(p, dims)):
        raise ConfigError(f"window {p} exceeds volume dims {dims}")
    c = model.spec.penultimate_channels
    logit_sum = np.zeros(dims, dtype=np.float32)
    feat_sum = np.zeros((c,) + dims, dtype=np.float32)
    count = np.zeros(dims, dtype=np.float32)
    for h0 in _window_starts(dims[0], p[0]):
        for w0 in _window_starts(dims[1], p[1]):
            for d0 in _window_starts(dims[2], p[2]):
                sl = (slice(h0, h0 + p[0]), slice(w0, w0 + p[1]),
                      slice(d0, d0 + p[2]))
                y, z = model.forward_array(image.data[sl].astype(np.float32))
                logit_sum[sl] += y
                feat_sum[(slice(None),) + sl] += z
                count[sl] += 1.0
    logit = Volume.from_array(logit_sum / count, spacing=image.spacing,
                              role="logit")
    return logit, FeatureMap.from_array(feat_sum / count[None])


# --------------------------------------------------------------------- GSR

def _train_sg_epochs(model, subjects, states, config, round_idx: int,
                     n_epochs: int, record: TrainRecord, phase: str):
    for e in range(n_epochs):
        rng = np.random.default_rng((config.rng_seed, 4, round_idx, e))
        losses = []
        for sub in subjects:
            y_pl = states[sub.sid].y_pl.data
            for _ in range(config.sg_patches_per_volume):
                img_p, tgt_p = _uniform_patch(sub.image, y_pl,
                                              config.patch_size_sg, rng)
                try:
                    losses.append(_train_step(model, img_p, tgt_p, None,
                                              config.lr))
                except NumericalError as exc:
                    _abort_with_checkpoint(
                        config, _copy_store(model.store),
                        "sg_abort.ckpt", exc)
        record.add_epoch(phase, float(np.mean(losses)) if losses else 0.0)


def _state_paths(out: Path, sid: str, r: int):
    return (out / "pseudo" / f"{sid}_round_{r}.vvol",
            out / "eta" / f"{sid}.csv")


def _write_round_state(out: Path, states: dict, r: int):
    for sid, st in states.items():
        pseudo_path, eta_path = _state_paths(out, sid, r)
        write_volume(st.y_pl, pseudo_path)
        write_eta_csv(st, eta_path)


def _load_round_state(out: Path, subjects, r: int) -> dict:
    states = {}
    for sub in subjects:
        pseudo_path, eta_path = _state_paths(out, sub.sid, r)
        y = read_volume(pseudo_path)
        history = ()
        if eta_path.exists():
            history = tuple(rec for rec in read_eta_csv(eta_path)
                            if rec.iteration <= r)
        states[sub.sid] = PseudoLabelState(y_pl=y, eta_history=history,
                                           volume_id=sub.sid)
    return states


def _round_complete(out: Path, subjects, r: int) -> bool:
    ck = out / "checkpoints" / f"round_{r}.ckpt"
    return ck.exists() and all(
        _state_paths(out, s.sid, r)[0].exists() for s in subjects)


def _fit_prototype(model, subjects, config) -> Prototype:
    collected = []

    def stream():
        for sub in subjects:
            _, z = sliding_window_infer(model, sub.image,
                                        config.patch_size_sg)
            collected.append(labeled_embeddings(z, sub.pva))
            yield z, sub.pva

    proto0 = init_prototype(stream())
    emb = np.concatenate(collected, axis=0)
    proto, _, _ = fine_tune(proto0, emb, steps=config.fpa_steps,
                            lr=config.fpa_lr)
    return proto


def run_gsr(config: ExperimentConfig, sl_params: ParamStore, subjects=None,
            record: TrainRecord | None = None):
    """Self-training stage: returns (sg params, per-volume states, prototype).

    Picks up after the newest complete round checkpoint when rerun on the
    same output directory, and replays nothing that is already on disk.
    """
    if subjects is None:
        data, train_ids, _ = load_dataset(config.data_dir)
        subjects = [data[s] for s in train_ids]
    if record is None:
        record = TrainRecord()
    out = Path(config.out_dir)
    for sub in ("checkpoints", "pseudo", "eta"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    sg_spec = ModelSpec(widths=config.widths_sg, role="S_g")
    rounds = config.self_training_rounds

    final_path = out / "checkpoints" / "final.ckpt"
    if final_path.exists():
        store, extras, _ = load_checkpoint(final_path)
        model = SegModel(sg_spec, store=store)
        states = _load_round_state(out, subjects, rounds)
        proto = None
        if "fpa.rho" in extras:
            proto = Prototype(rho=extras["fpa.rho"], fine_tuned=True,
                              source="fine_tuned")
        return model.store, states, proto

    resume_from = None
    for r in range(rounds, -1, -1):
        if _round_complete(out, subjects, r):
            resume_from = r
            break

    if resume_from is None:
        sl_model = SegModel(ModelSpec(widths=config.widths_sl, role="S_l"),
                            store=sl_params)
        states = {}
        for sub in subjects:
            logit, _ = sliding_window_infer(sl_model, sub.image,
                                            config.patch_size_sl)
            if config.use_pli:
                states[sub.sid] = init_pseudo(logit, sub.pva,
                                              volume_id=sub.sid)
            else:
                raw = Volume.from_array(logit.data, spacing=logit.spacing,
                                        role="pseudo_label")
                states[sub.sid] = PseudoLabelState(y_pl=raw,
                                                   volume_id=sub.sid)
        model = SegModel(sg_spec,
                         rng=np.random.default_rng((config.rng_seed, 3)))
        _train_sg_epochs(model, subjects, states, config, 0,
                         config.warmup_epochs, record, "warmup")
        _write_round_state(out, states, 0)
        save_checkpoint(out / "checkpoints" / "round_0.ckpt", model.store)
        record.add_checkpoint("checkpoints/round_0.ckpt")
        next_round = 1
    else:
        store, _, _ = load_checkpoint(
            out / "checkpoints" / f"round_{resume_from}.ckpt")
        model = SegModel(sg_spec, store=store)
        states = _load_round_state(out, subjects, resume_from)
        next_round = resume_from + 1

    for r in range(next_round, rounds + 1):
        _train_sg_epochs(model, subjects, states, config, r,
                         config.epochs_per_round, record, f"round_{r}")
        eta_log = {}
        for sub in subjects:
            logit2, _ = sliding_window_infer(model, sub.image,
                                             config.patch_size_sg)
            if config.use_plu:
                states[sub.sid], accepted = try_update(
                    states[sub.sid], logit2, sub.pva, t=r)
                last = states[sub.sid].eta_history[-1]
                eta_log[sub.sid] = [last.eta, bool(accepted)]
        _write_round_state(out, states, r)
        save_checkpoint(out / "checkpoints" / f"round_{r}.ckpt", model.store)
        record.add_checkpoint(f"checkpoints/round_{r}.ckpt")
        if eta_log:
            record.add_round(r, eta_log)

    proto = None
    extras = {}
    if config.use_fpa:
        proto = _fit_prototype(model, subjects, config)
        extras["fpa.rho"] = proto.rho
    save_checkpoint(final_path, model.store, extras=extras)
    record.add_checkpoint("checkpoints/final.ckpt")
    return model.store, states, proto


# ------------------------------------------------------------------ predict

def predict(sg_params: ParamStore, proto: Prototype | None, image: Volume,
            config: ExperimentConfig) -> Volume:
    """Sliding-window logits, optional prototype fusion, 0.5 threshold."""
    model = SegModel(ModelSpec(widths=config.widths_sg, role="S_g"),
                     store=sg_params)
    logit, z = sliding_window_infer(model, image, config.patch_size_sg)
    if config.fusion == "conv_only":
        fused = logit
    else:
        if proto is None:
            raise ConfigError(
                f"fusion policy {config.fusion!r} needs a fitted prototype")
        sim = similarity_map(z, proto, spacing=image.spacing)
        fused = fuse_at_test(logit, sim, config.fusion)
    return binarize(fused, 0.5)


# --------------------------------------------------------------- experiment

def _evaluate_split(sg_params, proto, subjects, config):
    if not subjects:
        return None
    preds = [predict(sg_params, proto, s.image, config) for s in subjects]
    report = evaluate(preds, [s.gt for s in subjects],
                      [s.tree for s in subjects],
                      ids=[s.sid for s in subjects])
    return report.to_json_dict()


def _report_dict(config, states, metrics) -> dict:
    cfg = {k: v for k, v in config.to_json_dict().items()
           if k not in ("data_dir", "out_dir")}
    eta = {sid: [[r.iteration, r.eta, bool(r.accepted)]
                 for r in states[sid].eta_history]
           for sid in sorted(states)}
    return {"config": cfg, "eta": eta, "metrics": metrics}


def run_experiment(config: ExperimentConfig) -> dict:
    """Full pipeline on one dataset: train, self-train, predict, score.

    Writes config.json, checkpoints, per-round pseudo labels, gate CSVs,
    report.json and train_log.json under config.out_dir, then returns the
    report.  Rerunning on the same directory resumes from the newest
    checkpoints; a different config on that directory is refused.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    canon = canonical_config_json(config)
    cfg_path = out / "config.json"
    if cfg_path.exists():
        if cfg_path.read_text() != canon:
            raise ValidationError(
                f"{out} holds a different experiment config; refusing to "
                "mix runs (pass force to start over)")
    else:
        cfg_path.write_text(canon)

    data, train_ids, test_ids = load_dataset(config.data_dir)
    train = [data[s] for s in train_ids]
    test = [data[s] for s in test_ids]
    record = TrainRecord()
    t0 = time.monotonic()

    sl_path = out / "checkpoints" / "sl.ckpt"
    if sl_path.exists():
        sl_store, _, _ = load_checkpoint(sl_path)
    else:
        sl_store = train_sl(config, train, record)
        (out / "checkpoints").mkdir(exist_ok=True)
        save_checkpoint(sl_path, sl_store)
        record.add_checkpoint("checkpoints/sl.ckpt")

    sg_store, states, proto = run_gsr(config, sl_store, train, record)
    metrics = _evaluate_split(sg_store, proto, test, config)
    report = _report_dict(config, states, metrics)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, sort_keys=True, indent=1)
    record.wall_clock_s = time.monotonic() - t0
    with open(out / "train_log.json", "w") as f:
        json.dump(record.to_json_dict(), f, sort_keys=True, indent=1)
    return report


def load_experiment(out_dir):
    """Read back (config, sg params, prototype) from a finished run."""
    out = Path(out_dir)
    config = ExperimentConfig.from_json_dict(
        json.loads((out / "config.json").read_text()))
    store, extras, _ = load_checkpoint(out / "checkpoints" / "final.ckpt")
    proto = None
    if "fpa.rho" in extras:
        proto = Prototype(rho=extras["fpa.rho"], fine_tuned=True,
                          source="fine_tuned")
    return config, store, proto


# ----------------------------------------------------------------- ablation

def ablation_row_config(config: ExperimentConfig,
                        row: str) -> ExperimentConfig:
    """Translate a toggle-table row name into a concrete config.

    All rows keep the same schedule so they spend equal compute; only the
    gates differ.  The last row fuses with the configured policy, every
    other row predicts from the conv head alone.
    """
    if row == "baseline":
        return replace(config, use_pli=False, use_plu=False, use_fpa=False,
                       fusion="conv_only")
    if row == "pli":
        return replace(config, use_pli=True, use_plu=False, use_fpa=False,
                       fusion="conv_only")
    if row == "pli_plu":
        return replace(config, use_pli=True, use_plu=True, use_fpa=False,
                       fusion="conv_only")
    if row == "pli_plu_fpa":
        fusion = config.fusion if config.fusion != "conv_only" else "max"
        return replace(config, use_pli=True, use_plu=True, use_fpa=True,
                       fusion=fusion)
    raise ConfigError(f"unknown ablation row {row!r}")


def run_ablation(config: ExperimentConfig, seeds) -> dict:
    """Gate ablation over several seeds; returns and writes a result table.

    Prototype fitting happens after self-training and does not touch the
    backbone, so the pli_plu row is scored from the pli_plu_fpa run's
    backbone with conv-only predictions instead of training a third time.
    The full-row metrics are reported under the fused policy and again
    under conv_only for a same-backbone comparison.
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, _, test_ids = load_dataset(config.data_dir)
    test = [data[s] for s in test_ids]

    rows = {row: [] for row in ABLATION_ROWS}
    for seed in seeds:
        for row in ("baseline", "pli", "pli_plu_fpa"):
            run_dir = out / f"seed_{seed}" / row
            rc = ablation_row_config(
                replace(config, rng_seed=seed, out_dir=str(run_dir)), row)
            report = run_experiment(rc)
            rows[row].append(report["metrics"])
            if row == "pli_plu_fpa":
                _, sg_store, proto = load_experiment(run_dir)
                conv_cfg = replace(rc, fusion="conv_only")
                rows["pli_plu"].append(
                    _evaluate_split(sg_store, proto, test, conv_cfg))

    summary = {}
    for row, reps in rows.items():
        agg = {}
        for key in ("dice", "rdice", "ov", "of_mean"):
            vals = [rep["aggregate"][key]["mean"] for rep in reps
                    if rep is not None]
            agg[key] = float(np.mean(vals)) if vals else None
        summary[row] = agg
    result = {"seeds": seeds, "rows": rows, "summary": summary}
    with open(out / "ablation.json", "w") as f:
        json.dump(result, f, sort_keys=True, indent=1)
    return result
