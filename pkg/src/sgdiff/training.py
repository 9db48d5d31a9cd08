"""Run configuration, the training loop, sampling, evaluation and the ablation harness."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from . import datagen
from . import tensor as T
from .diffusion import Cascade, CascadeConfig, cascade_sample, sample_stage, training_loss
from .graphconv import pretrain_autoencoder
from .metrics import ToyFeatureNet, fid_proxy, is_proxy, train_feature_net
from .nn import Adam
from .scenegraph import ParseError, parse_caption
from .swin import WindowAttention
from .textenc import Vocabulary

log = logging.getLogger(__name__)

# Optimizer settings used for full-scale training; desk runs override them.
FULL_SCALE_LR = 1e-4
FULL_SCALE_WARMUP_STEPS = 10_000
FULL_SCALE_BATCH_SIZE = 8
FULL_SCALE_EPOCHS = 1_000

ROLES = Cascade.ROLES

# (label, use_scene_graph, use_swin_unet)
ABLATION_ROWS = (
    ("plain", False, False),
    ("plain+sg", True, False),
    ("swinv2-unet", False, True),
    ("swinv2-unet+sg", True, True),
)
REFERENCE_FID = {"plain": 7.27, "plain+sg": 7.24, "swinv2-unet": 7.23, "swinv2-unet+sg": 7.21}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str | None = None
    data_seed: int = 0
    n_train: int = 256
    n_heldout: int = 64
    stages: list[str] = field(default_factory=lambda: list(ROLES))
    model: dict = field(default_factory=dict)
    lr: float = 1e-3
    warmup_steps: int = 100
    batch_size: int = 16
    steps: int = 2000
    grad_clip: float | None = 1.0
    use_scene_graph: bool = True
    use_swin_unet: bool = True
    freeze_text_encoder: bool = False
    joint_graph: bool = False
    gcn_pretrain_steps: int = 300
    checkpoint_every: int = 0
    eval_draws: int = 4
    out_dir: str = "runs/default"

    def __post_init__(self):
        bad = [s for s in self.stages if s not in ROLES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {list(ROLES)}")
        try:
            CascadeConfig(**self.model)
        except TypeError as exc:
            raise ConfigError(f"bad model section: {exc}") from exc
        if self.batch_size < 1 or self.steps < 0:
            raise ConfigError("batch_size must be >= 1 and steps >= 0")

    @classmethod
    def full_scale(cls, **overrides) -> RunConfig:
        """Full-scale optimizer defaults (lr 1e-4, 10k warmup, batch 8)."""
        base = dict(lr=FULL_SCALE_LR, warmup_steps=FULL_SCALE_WARMUP_STEPS, batch_size=FULL_SCALE_BATCH_SIZE)
        base.update(overrides)
        return cls(**base)

    def cascade_config(self) -> CascadeConfig:
        model = dict(self.model)
        model["attention"] = "window" if self.use_swin_unet else "full"
        return CascadeConfig(**model)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cfg = cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if cfg.data_dir is not None and not Path(cfg.data_dir).exists():
            raise ConfigError(f"data_dir {cfg.data_dir} does not exist")
        return cfg


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def generate_split(seed: int, n_train: int, n_heldout: int):
    """Training samples and held-out samples whose captions never occur in training."""
    train = datagen.generate(seed, n_train)
    seen = {s.caption for s in train}
    free = len(datagen.all_graphs()) - len(seen)
    if n_heldout > free:
        raise ValueError(f"only {free} unseen captions are left for the held-out split")
    rng = np.random.default_rng([seed, 1])
    held: list[datagen.Sample] = []
    while len(held) < n_heldout:
        g = datagen.random_graph(rng)
        cap = g.caption()
        if cap in seen:
            continue
        seen.add(cap)
        held.append(datagen.make_sample(g))
    return train, held


def load_data(cfg: RunConfig):
    if cfg.data_dir is None:
        return generate_split(cfg.data_seed, cfg.n_train, cfg.n_heldout)
    root = Path(cfg.data_dir)
    if not root.exists():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    train = datagen.load_dataset(root / "train")
    held = datagen.load_dataset(root / "heldout") if (root / "heldout").exists() else []
    return train[:cfg.n_train], held[:cfg.n_heldout]


def stack_images(samples, resolution: int) -> np.ndarray:
    return np.stack([s.images[resolution] for s in samples]).astype(np.float32)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def build_model(cfg: RunConfig) -> Cascade:
    return Cascade(cfg.cascade_config(), Vocabulary.from_grammar(), np.random.default_rng(cfg.seed))


def clamp_all_tau(model) -> None:
    for mod in _walk(model):
        if isinstance(mod, WindowAttention):
            mod.clamp_tau()


def _walk(mod):
    from .nn import Module

    yield mod
    for name, value in vars(mod).items():
        if not name.startswith("_") and isinstance(value, Module):
            yield from _walk(value)


def stage_parameters(model: Cascade, role: str, cfg: RunConfig) -> list[tuple[str, T.Tensor]]:
    """Parameters updated while training ``role``.

    The conditioner trains together with the base stage and stays fixed for the
    super-resolution stages; the graph network only trains with ``joint_graph``.
    """
    k = ROLES.index(role)
    params = list(model.stages[k].named_parameters(f"stages.{k}."))
    if role == "base":
        cond = model.conditioner
        if not cfg.freeze_text_encoder:
            params += list(cond.text.named_parameters("conditioner.text."))
        params += list(cond.adapters.named_parameters("conditioner.adapters."))
        if cfg.joint_graph:
            params += list(cond.graph.named_parameters("conditioner.graph."))
    return params


class Trainer:
    """Owns the model, optimizer and random streams of one training run."""

    def __init__(self, cfg: RunConfig, model: Cascade | None = None, data=None):
        self.cfg = cfg
        self.model = model if model is not None else build_model(cfg)
        self.train_data, self.heldout = data if data is not None else load_data(cfg)
        if not self.train_data:
            raise ValueError("empty training set")
        self.rng = np.random.default_rng([cfg.seed, 2])
        self.stage_index = 0
        self.step = 0
        self.completed: list[str] = []
        self.gcn_pretrained = False
        self.losses: list[dict] = []
        self.optimizer: Adam | None = None

    # -- setup -----------------------------------------------------------
    @property
    def role(self) -> str:
        return self.cfg.stages[self.stage_index]

    def pretrain_graph(self) -> None:
        if self.gcn_pretrained or self.cfg.gcn_pretrain_steps <= 0:
            self.gcn_pretrained = True
            return
        graphs = [s.graph for s in self.train_data]
        pretrain_autoencoder(self.model.conditioner.graph, graphs, self.cfg.gcn_pretrain_steps,
                             rng=np.random.default_rng([self.cfg.seed, 3]))
        self.gcn_pretrained = True

    def _make_optimizer(self) -> Adam:
        opt = Adam(stage_parameters(self.model, self.role, self.cfg), lr=self.cfg.lr,
                   warmup_steps=self.cfg.warmup_steps, grad_clip=self.cfg.grad_clip)
        opt.post_step_hooks.append(lambda: clamp_all_tau(self.model))
        return opt

    # -- one update --------------------------------------------------------
    def batch_loss(self, samples, rng, role: str | None = None, t=None, eps=None) -> T.Tensor:
        role = role or self.role
        k = ROLES.index(role)
        stage = self.model.stages[k]
        res = stage.resolution
        x0 = stack_images(samples, res)
        low = stack_images(samples, stage.low_res) if stage.low_res else None
        cond = self.model.condition([s.caption for s in samples], [s.graph for s in samples],
                                    use_graph=self.cfg.use_scene_graph)
        return training_loss(stage, x0, cond, rng, low, t=t, eps=eps)

    def train_step(self) -> float:
        if self.optimizer is None:
            self.optimizer = self._make_optimizer()
        n = len(self.train_data)
        idx = self.rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        loss = self.batch_loss([self.train_data[i] for i in idx], self.rng)
        self.optimizer.zero_grad()
        self.model.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.step += 1
        value = loss.item()
        if not math.isfinite(value):
            raise FloatingPointError(f"loss diverged at step {self.step}")
        self.losses.append({"stage": self.role, "step": self.step, "loss": value,
                            "lr": self.optimizer.lr})
        return value

    def run(self, log_path: Path | None = None, checkpoint_path: Path | None = None,
            max_steps: int | None = None) -> list[dict]:
        """Train remaining stages in order; returns the loss records written."""
        self.pretrain_graph()
        done = 0
        fh = open(log_path, "a", encoding="utf-8") if log_path else None
        try:
            while self.stage_index < len(self.cfg.stages):
                while self.step < self.cfg.steps:
                    if max_steps is not None and done >= max_steps:
                        return self.losses
                    self.train_step()
                    done += 1
                    if fh:
                        fh.write(json.dumps(self.losses[-1], sort_keys=True) + "\n")
                    if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                        self.save(checkpoint_path)
                self.completed.append(self.role)
                self.stage_index += 1
                self.step = 0
                self.optimizer = None
                if checkpoint_path:
                    self.save(checkpoint_path)
        finally:
            if fh:
                fh.close()
        return self.losses

    # -- persistence -------------------------------------------------------
    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        arrays = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        if self.optimizer is not None:
            arrays.update({f"optim.{k}": v for k, v in self.optimizer.state_dict().items()})
        config = self.cfg.to_dict()
        config.pop("out_dir")   # where a run was written is not part of its state
        meta = {
            "config": config,
            "stage_index": self.stage_index,
            "step": self.step,
            "completed": list(self.completed),
            "gcn_pretrained": self.gcn_pretrained,
            "optim_step": self.optimizer.step_count if self.optimizer else None,
            "rng": self.rng.bit_generator.state,
        }
        return arrays, meta

    def save(self, path) -> None:
        arrays, meta = self.state()
        ckpt.save(path, arrays, meta)

    @classmethod
    def restore(cls, path, cfg: RunConfig | None = None, data=None) -> Trainer:
        arrays, meta = ckpt.load(path)
        cfg = cfg or RunConfig.from_dict(meta["config"])
        tr = cls(cfg, data=data)
        load_model_arrays(tr.model, arrays)
        tr.stage_index = meta["stage_index"]
        tr.step = meta["step"]
        tr.completed = list(meta["completed"])
        tr.gcn_pretrained = meta["gcn_pretrained"]
        tr.rng.bit_generator.state = meta["rng"]
        if meta.get("optim_step") is not None:
            tr.optimizer = tr._make_optimizer()
            tr.optimizer.load_state_dict({k[len("optim."):]: v for k, v in arrays.items()
                                          if k.startswith("optim.")}, meta["optim_step"])
        return tr


def load_model_arrays(model: Cascade, arrays: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")})


def load_model(path, cfg: RunConfig | None = None) -> tuple[Cascade, RunConfig]:
    arrays, meta = ckpt.load(path)
    cfg = cfg or RunConfig.from_dict(meta["config"])
    model = build_model(cfg)
    load_model_arrays(model, arrays)
    return model, cfg


def train(cfg: RunConfig, resume: str | Path | None = None) -> Trainer:
    """Train every configured stage; writes ``checkpoint.ckpt`` and ``losses.jsonl`` to ``out_dir``."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    tr = Trainer.restore(resume, cfg) if resume else Trainer(cfg)
    tr.run(out / "losses.jsonl", out / "checkpoint.ckpt")
    return tr


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def heldout_loss(model: Cascade, samples, role: str = "base", use_graph: bool = True, seed: int = 0,
                 draws: int = 4, batch_size: int = 32) -> float:
    """Mean denoising loss over ``samples`` with fixed (seeded) timestep/noise draws."""
    k = ROLES.index(role)
    stage = model.stages[k]
    rng = np.random.default_rng([seed, 4])
    total, count = 0.0, 0
    with T.no_grad():
        for _ in range(draws):
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                x0 = stack_images(chunk, stage.resolution)
                low = stack_images(chunk, stage.low_res) if stage.low_res else None
                cond = model.condition([s.caption for s in chunk], [s.graph for s in chunk], use_graph)
                loss = training_loss(stage, x0, cond, rng, low)
                total += loss.item() * len(chunk)
                count += len(chunk)
    return total / count


def generate_images(model: Cascade, captions: Sequence[str], graphs, rng: np.random.Generator,
                    use_graph: bool = True, n_stages: int | None = None, steps: int | None = None,
                    batch_size: int = 32) -> list[np.ndarray]:
    """Cascade samples for each caption, as one array per stage."""
    per_stage: list[list[np.ndarray]] = []
    with T.no_grad():
        for start in range(0, len(captions), batch_size):
            caps = list(captions[start:start + batch_size])
            gs = list(graphs[start:start + batch_size]) if graphs is not None else None
            cond = model.condition(caps, gs, use_graph)
            imgs = cascade_sample(model, cond, rng, steps, n_stages)
            for k, im in enumerate(imgs):
                if len(per_stage) <= k:
                    per_stage.append([])
                per_stage[k].append(im)
    return [np.concatenate(p) for p in per_stage]


def feature_net(seed: int = 0, n: int = 2000, steps: int = 800) -> ToyFeatureNet:
    """Deterministically trained toy feature network for the proxy metrics."""
    data = datagen.generate(seed + 7919, n)
    net = ToyFeatureNet(rng=np.random.default_rng([seed, 5]))
    train_feature_net(net, stack_images(data, 8), np.array([s.label for s in data]), steps=steps,
                      rng=np.random.default_rng([seed, 6]))
    return net


def evaluate(model: Cascade, samples, n: int, seed: int = 0, role: str = "base",
             use_graph: bool = True, net: ToyFeatureNet | None = None, steps: int | None = None) -> dict:
    """FID-proxy of generated images against the matching reals, plus IS-proxy."""
    if n < 2:
        raise ValueError("evaluation needs n >= 2")
    k = ROLES.index(role)
    samples = list(samples)[:n]
    if len(samples) < 2:
        raise ValueError("evaluation needs at least two held-out samples")
    net = net or feature_net()
    imgs = generate_images(model, [s.caption for s in samples], [s.graph for s in samples],
                           np.random.default_rng([seed, 7]), use_graph, n_stages=k + 1, steps=steps)[k]
    reals = stack_images(samples, model.stages[k].resolution)
    return {
        "fid_proxy": fid_proxy(net, reals, imgs),
        "is_proxy": is_proxy(net, imgs),
        "n_samples": len(samples),
        "seed": seed,
        "stage": role,
    }


REPORT_FIELDS = ("fid_proxy", "is_proxy", "n_samples", "seed", "stage")


# ---------------------------------------------------------------------------
# sampling to files
# ---------------------------------------------------------------------------

def sample_to_files(model: Cascade, cfg: RunConfig, captions: Sequence[str], seed: int, out_dir,
                    steps: int | None = None) -> list[dict]:
    """Write PNGs for every stage of every caption; bad captions are recorded, not fatal."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[dict] = []
    rng = np.random.default_rng([seed, 8])
    for line, caption in enumerate(captions, start=1):
        caption = caption.strip()
        if not caption:
            continue
        graph = None
        if cfg.use_scene_graph:
            try:
                graph = parse_caption(caption)
            except ParseError as exc:
                rows.append({"line": line, "caption": caption, "seed": seed, "error": str(exc)})
                continue
        imgs = generate_images(model, [caption], [graph] if graph else None, rng,
                               use_graph=cfg.use_scene_graph, steps=steps)
        for stage, img in zip(ROLES, imgs):
            res = img.shape[1]
            name = f"{line:04d}_{stage}_{res}.png"
            datagen.save_png(out / name, img[0])
            rows.append({"line": line, "caption": caption, "seed": seed, "stage": stage,
                         "resolution": res, "path": name})
    (out / "manifest.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows),
                                        encoding="utf-8")
    return rows


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablate(cfg: RunConfig, seeds: Sequence[int] | None = None, eval_samples: int = 32,
           rows=ABLATION_ROWS, net: ToyFeatureNet | None = None) -> list[dict]:
    """Train the base stage for each (scene graph, swin UNet) combination and compare.

    Every row shares data, seeds and step budget. Held-out loss and FID-proxy are
    averaged over ``seeds``.
    """
    seeds = list(seeds) if seeds is not None else [cfg.seed]
    data = load_data(cfg)
    net = net or feature_net(cfg.data_seed)
    table = []
    for label, use_sg, use_swin in rows:
        losses, fids, finite = [], [], True
        for s in seeds:
            run = dataclasses.replace(cfg, seed=s, stages=["base"], use_scene_graph=use_sg,
                                      use_swin_unet=use_swin)
            tr = Trainer(run, data=data)
            try:
                tr.run()
            except FloatingPointError:
                finite = False
                break
            losses.append(heldout_loss(tr.model, data[1], "base", use_sg, seed=s, draws=cfg.eval_draws))
            if eval_samples:
                fids.append(evaluate(tr.model, data[1], eval_samples, seed=s, use_graph=use_sg,
                                     net=net)["fid_proxy"])
        table.append({
            "model": label,
            "scene_graph": use_sg,
            "swinv2_unet": use_swin,
            "heldout_loss": float(np.mean(losses)) if losses else float("nan"),
            "fid_proxy": float(np.mean(fids)) if fids else None,
            "finite": finite,
            "reference_fid": REFERENCE_FID.get(label),
            "parameters": tr.model.num_parameters(),
        })
    return table


def format_table(rows: list[dict]) -> str:
    lines = ["| model | scene graph | swinv2-unet | held-out loss | FID-proxy | reference FID |",
             "|---|---|---|---|---|---|"]
    for r in rows:
        fidp = "-" if r["fid_proxy"] is None else f"{r['fid_proxy']:.4f}"
        lines.append(f"| {r['model']} | {'yes' if r['scene_graph'] else ''} | "
                     f"{'yes' if r['swinv2_unet'] else ''} | {r['heldout_loss']:.4f} | {fidp} | "
                     f"{r['reference_fid']} |")
    return "\n".join(lines)
