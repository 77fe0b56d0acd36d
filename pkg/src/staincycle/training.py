"""Bidirectional adversarial training loop: two generators, two discriminators,
image pools, registered-fraction regimes, checkpointing, and inference."""

from __future__ import annotations

import csv
import itertools
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .data import (DatasetManifest, PatchBatch, Stain, StainPatch, DataError,
                   registered_pairs, _load_patch)
from .losses import (LossReport, LossWeights, adversarial_loss, cycle_loss,
                     identity_loss, registered_loss, structural_loss, total_loss)
from .model import (AttentionConfig, DiscriminatorConfig, Generator, GeneratorConfig,
                    PatchDiscriminator, init_discriminator, init_generator,
                    load_checkpoint, load_module_arrays, save_checkpoint,
                    state_dict_to_arrays)
from .structure import CannyParams, EdgeMap, canny_edges

VARIANTS = ("base", "edatt", "datt", "st", "scgan_wo_sl", "scgan")

# variant -> (attention_mode, use_structure_channel, structural-loss active)
_VARIANT_SETTINGS = {
    "base": ("none", False, False),
    "edatt": ("encoder_and_decoder", False, False),
    "datt": ("decoder_only", False, False),
    "st": ("none", True, True),
    "scgan_wo_sl": ("decoder_only", True, False),
    "scgan": ("decoder_only", True, True),
}


class DivergenceError(FloatingPointError):
    """A loss term became non-finite during training."""


@dataclass
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 2e-4
    batch_size: int = 1
    epochs: int = 1
    registered_fraction: float = 0.0
    seed: int = 0
    variant: str = "scgan"
    image_size: int = 128
    base_channels: int = 64
    n_downsample: int = 2
    n_res_blocks: Optional[int] = None  # default: 6 below 256 px, 9 at or above
    disc_base_channels: int = 64
    disc_n_layers: int = 3
    canny: CannyParams = field(default_factory=CannyParams)
    pool_capacity: int = 50
    checkpoint_keep: int = 3

    def __post_init__(self) -> None:
        if isinstance(self.weights, dict):
            self.weights = LossWeights.from_dict(self.weights)
        if isinstance(self.canny, dict):
            self.canny = CannyParams(**self.canny)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0.0 <= self.registered_fraction <= 1.0):
            raise ValueError("registered_fraction must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")

    @property
    def resolved_res_blocks(self) -> int:
        if self.n_res_blocks is not None:
            return self.n_res_blocks
        return 9 if self.image_size >= 256 else 6

    def generator_config(self) -> GeneratorConfig:
        attention_mode, use_structure, _ = _VARIANT_SETTINGS[self.variant]
        return GeneratorConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            n_downsample=self.n_downsample,
            n_res_blocks=self.resolved_res_blocks,
            attention_mode=attention_mode,
            use_structure_channel=use_structure,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(base_channels=self.disc_base_channels,
                                   n_layers=self.disc_n_layers)

    def effective_weights(self) -> LossWeights:
        """Variant-adjusted weights: the structural term is zeroed for variants
        trained without the structural loss."""
        _, _, sl_active = _VARIANT_SETTINGS[self.variant]
        w = LossWeights.from_dict(self.weights.to_dict())
        if not sl_active:
            w.lambda4 = 0.0
        return w

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.to_dict(),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "registered_fraction": self.registered_fraction,
            "seed": self.seed,
            "variant": self.variant,
            "image_size": self.image_size,
            "base_channels": self.base_channels,
            "n_downsample": self.n_downsample,
            "n_res_blocks": self.n_res_blocks,
            "disc_base_channels": self.disc_base_channels,
            "disc_n_layers": self.disc_n_layers,
            "canny": {"sigma": self.canny.sigma, "low": self.canny.low, "high": self.canny.high},
            "pool_capacity": self.pool_capacity,
            "checkpoint_keep": self.checkpoint_keep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class ImagePool:
    """History buffer of generated images (capacity 50 by convention): below
    capacity every fresh fake is stored and returned; at capacity a stored fake
    is returned (and replaced) with probability 0.5."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        self.capacity = capacity
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, fakes: torch.Tensor) -> torch.Tensor:
        out = []
        for img in fakes.detach():
            img = img.clone()
            if len(self.images) < self.capacity:
                self.images.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                idx = int(self.rng.integers(len(self.images)))
                out.append(self.images[idx])
                self.images[idx] = img
            else:
                out.append(img)
        return torch.stack(out)


@dataclass
class TrainState:
    g_he2ihc: Generator
    g_ihc2he: Generator
    d_ihc: PatchDiscriminator
    d_he: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    pool_ihc: ImagePool
    pool_he: ImagePool
    step: int = 0


def init_train_state(config: TrainConfig) -> TrainState:
    gen_cfg = config.generator_config()
    disc_cfg = config.discriminator_config()
    g_a = init_generator(gen_cfg, config.seed)
    g_b = init_generator(gen_cfg, config.seed + 1)
    d_a = init_discriminator(disc_cfg, config.seed + 2)
    d_b = init_discriminator(disc_cfg, config.seed + 3)
    opt_g = torch.optim.Adam(itertools.chain(g_a.parameters(), g_b.parameters()),
                             lr=config.learning_rate, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(itertools.chain(d_a.parameters(), d_b.parameters()),
                             lr=config.learning_rate, betas=(0.5, 0.999))
    rng = np.random.default_rng(config.seed + 17)
    return TrainState(g_a, g_b, d_a, d_b, opt_g, opt_d,
                      ImagePool(config.pool_capacity, rng),
                      ImagePool(config.pool_capacity, rng))


def _to_tensor(pixels: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(pixels)).float().permute(2, 0, 1)


def batch_tensors(batch: PatchBatch, canny: CannyParams,
                  edge_cache: Optional[dict] = None) -> dict[str, torch.Tensor]:
    """Stack a PatchBatch into model tensors: [0,1] RGB, [-1,1] RGB, Canny edges,
    and the concatenated 4-channel generator inputs."""

    def edges_for(patch: StainPatch) -> np.ndarray:
        if edge_cache is not None and id(patch) in edge_cache:
            return edge_cache[id(patch)]
        e = canny_edges(patch.pixels, canny).values
        if edge_cache is not None:
            edge_cache[id(patch)] = e
        return e

    def stack(patches: list[StainPatch]) -> tuple[torch.Tensor, torch.Tensor]:
        rgb01 = torch.stack([_to_tensor(p.pixels) for p in patches])
        e = torch.stack([torch.from_numpy(edges_for(p)).float()[None] for p in patches])
        return rgb01, e

    he01, he_edges = stack(batch.he)
    ihc01, ihc_edges = stack(batch.ihc)
    return {
        "he01": he01, "ihc01": ihc01,
        "he_edges": he_edges, "ihc_edges": ihc_edges,
        "he4": torch.cat([he01 * 2 - 1, he_edges], dim=1),
        "ihc4": torch.cat([ihc01 * 2 - 1, ihc_edges], dim=1),
    }


def _finite(value: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise DivergenceError(f"non-finite loss term: {name}")
    return value


def train_step(state: TrainState, batch: PatchBatch, config: TrainConfig,
               edge_cache: Optional[dict] = None) -> tuple[TrainState, LossReport]:
    """One optimization step over both translation directions.

    Generators minimize the weighted objective (plus the registered MAE term on
    registered batches); each discriminator then minimizes half the LSGAN loss
    on (real, pooled fake). Deterministic given (state, batch, config).
    """
    w = config.effective_weights()
    t = batch_tensors(batch, config.canny, edge_cache)

    # -- generator update ---------------------------------------------------
    fake_ihc_rgb, fake_ihc_edge = state.g_he2ihc(t["he4"])
    fake_he_rgb, fake_he_edge = state.g_ihc2he(t["ihc4"])

    adv_g = _finite(0.5 * (adversarial_loss(state.d_ihc(fake_ihc_rgb), target_real=True)
                           + adversarial_loss(state.d_he(fake_he_rgb), target_real=True)),
                    "adv_g")

    rec_he = torch.cat(state.g_ihc2he(torch.cat([fake_ihc_rgb, fake_ihc_edge], dim=1)), dim=1)
    rec_ihc = torch.cat(state.g_he2ihc(torch.cat([fake_he_rgb, fake_he_edge], dim=1)), dim=1)
    cyc_f = _finite(cycle_loss(t["he4"], rec_he), "cycle_f")
    cyc_b = _finite(cycle_loss(t["ihc4"], rec_ihc), "cycle_b")

    idt_ihc = torch.cat(state.g_he2ihc(t["ihc4"]), dim=1)
    idt_he = torch.cat(state.g_ihc2he(t["he4"]), dim=1)
    ident = _finite(0.5 * (identity_loss(t["ihc4"], idt_ihc)
                           + identity_loss(t["he4"], idt_he)), "identity")

    if w.lambda4 > 0:
        sl = _finite(0.5 * (structural_loss(t["he_edges"], fake_ihc_edge)
                            + structural_loss(t["ihc_edges"], fake_he_edge)), "structural")
    else:
        sl = torch.zeros(())

    if batch.registered:
        reg = _finite(0.5 * (registered_loss((fake_ihc_rgb + 1) / 2, t["ihc01"])
                             + registered_loss((fake_he_rgb + 1) / 2, t["he01"])),
                      "registered")
    else:
        reg = torch.zeros(())

    g_total = total_loss(adv_g, cyc_f, cyc_b, ident, sl, w, registered=reg)
    state.opt_g.zero_grad(set_to_none=True)
    g_total.backward()
    state.opt_g.step()

    # reported total recombines the float64 components so it reproduces the
    # weighted sum exactly, independent of f32 accumulation order
    total_f = float(total_loss(float(adv_g.detach()), float(cyc_f.detach()),
                               float(cyc_b.detach()), float(ident.detach()),
                               float(sl.detach()), w, registered=float(reg.detach())))

    # -- discriminator update ----------------------------------------------
    pooled_ihc = state.pool_ihc.query(fake_ihc_rgb)
    pooled_he = state.pool_he.query(fake_he_rgb)
    d_ihc_loss = 0.5 * (adversarial_loss(state.d_ihc(t["ihc01"] * 2 - 1), target_real=True)
                        + adversarial_loss(state.d_ihc(pooled_ihc), target_real=False))
    d_he_loss = 0.5 * (adversarial_loss(state.d_he(t["he01"] * 2 - 1), target_real=True)
                       + adversarial_loss(state.d_he(pooled_he), target_real=False))
    adv_d = _finite(0.5 * (d_ihc_loss + d_he_loss), "adv_d")
    state.opt_d.zero_grad(set_to_none=True)
    (d_ihc_loss + d_he_loss).backward()
    state.opt_d.step()

    state.step += 1
    report = LossReport(
        adv_g=float(adv_g.detach()), adv_d=float(adv_d.detach()),
        cycle_f=float(cyc_f.detach()), cycle_b=float(cyc_b.detach()),
        identity=float(ident.detach()), structural=float(sl.detach()),
        registered=float(reg.detach()), total=total_f,
    )
    return state, report


def _lr_factor(epoch: int, epochs: int) -> float:
    """Constant rate, then linear decay to zero over the final half of training."""
    decay_start = epochs // 2
    if epoch < decay_start or epochs == decay_start:
        return 1.0
    return 1.0 - (epoch - decay_start) / (epochs - decay_start)


def _checkpoint_config(config: TrainConfig, epoch: int, ihc_stain: str) -> dict:
    return {
        "train": config.to_dict(),
        "generator": config.generator_config().to_dict(),
        "discriminator": config.discriminator_config().to_dict(),
        "epoch": epoch,
        "ihc_stain": ihc_stain,
    }


def save_train_checkpoint(state: TrainState, config: TrainConfig, path: Path,
                          epoch: int, ihc_stain: str) -> Path:
    tensors: dict[str, np.ndarray] = {}
    for prefix, module in (("g_he2ihc.", state.g_he2ihc), ("g_ihc2he.", state.g_ihc2he),
                           ("d_ihc.", state.d_ihc), ("d_he.", state.d_he)):
        for name, arr in state_dict_to_arrays(module).items():
            tensors[prefix + name] = arr
    return save_checkpoint(path, _checkpoint_config(config, epoch, ihc_stain), tensors)


def train(config: TrainConfig, manifest: DatasetManifest, out_dir: str | Path) -> Path:
    """Run the full training loop over a dataset manifest.

    Writes per-step loss rows to loss_log.csv, a loss-curve figure, and per-epoch
    checkpoints (last `checkpoint_keep` plus best-by-total-loss are retained).
    Returns the final checkpoint path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)

    torch.manual_seed(config.seed)
    state = init_train_state(config)

    he_patches = [_load_patch(manifest, e) for e in manifest.by_stain(Stain.HE)]
    ihc_patches = [_load_patch(manifest, e) for e in manifest.ihc_entries()]
    if not he_patches or not ihc_patches:
        raise DataError("manifest must contain patches in both domains")
    ihc_stain = ihc_patches[0].stain.value
    pair_index = {p.pair_id: i for i, p in enumerate(ihc_patches) if p.pair_id is not None}
    pairs = [(i, pair_index[p.pair_id]) for i, p in enumerate(he_patches)
             if p.pair_id is not None and p.pair_id in pair_index]
    if config.registered_fraction > 0 and not pairs:
        raise DataError("registered_fraction > 0 requires registered pairs in the manifest")

    edge_cache: dict = {}
    rng = np.random.default_rng(config.seed)
    b = config.batch_size
    steps_per_epoch = min(len(he_patches), len(ihc_patches)) // b
    if steps_per_epoch == 0:
        raise DataError("batch_size exceeds dataset size")

    rows: list[list] = []
    epoch_totals: list[float] = []
    best = (float("inf"), None)
    kept: list[Path] = []

    for epoch in range(config.epochs):
        factor = _lr_factor(epoch, config.epochs)
        for opt in (state.opt_g, state.opt_d):
            for group in opt.param_groups:
                group["lr"] = config.learning_rate * factor

        totals = []
        for _ in range(steps_per_epoch):
            use_registered = bool(pairs) and len(pairs) >= b \
                and rng.random() < config.registered_fraction
            if use_registered:
                idx = rng.choice(len(pairs), size=b, replace=False)
                batch = PatchBatch(he=[he_patches[pairs[i][0]] for i in idx],
                                   ihc=[ihc_patches[pairs[i][1]] for i in idx],
                                   registered=True)
            else:
                hi = rng.choice(len(he_patches), size=b, replace=False)
                ii = rng.choice(len(ihc_patches), size=b, replace=False)
                batch = PatchBatch(he=[he_patches[i] for i in hi],
                                   ihc=[ihc_patches[i] for i in ii],
                                   registered=False)
            state, report = train_step(state, batch, config, edge_cache)
            rows.append([state.step] + report.row())
            totals.append(report.total)

        epoch_mean = float(np.mean(totals))
        epoch_totals.append(epoch_mean)
        path = save_train_checkpoint(state, config, ckpt_dir / f"epoch_{epoch + 1:03d}",
                                     epoch + 1, ihc_stain)
        kept.append(path)
        if epoch_mean < best[0]:
            best = (epoch_mean, path)
        while len(kept) > config.checkpoint_keep:
            victim = kept.pop(0)
            if victim != best[1]:
                shutil.rmtree(victim)

    _write_loss_log(out / "loss_log.csv", rows)
    _plot_loss_curves(out / "loss_curves.png", rows)
    final = save_train_checkpoint(state, config, ckpt_dir / "final", config.epochs, ihc_stain)
    return final


def _write_loss_log(path: Path, rows: list[list]) -> None:
    tmp = path.with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step"] + list(LossReport.FIELDS))
        for row in rows:
            writer.writerow([row[0]] + [repr(v) for v in row[1:]])
    tmp.rename(path)


def _plot_loss_curves(path: Path, rows: list[list]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not rows:
        return
    arr = np.array([[r[0]] + r[1:] for r in rows], dtype=float)
    steps = arr[:, 0]
    fig, axes = plt.subplots(2, 1, figsize=(8, 7), sharex=True)
    for name, col in zip(LossReport.FIELDS, range(1, arr.shape[1])):
        ax = axes[0] if name in ("total", "adv_g", "adv_d") else axes[1]
        ax.plot(steps, arr[:, col], label=name, linewidth=1)
    for ax in axes:
        ax.legend(loc="upper right", fontsize=8)
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("adversarial / total")
    axes[1].set_ylabel("reconstruction terms")
    axes[1].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def translate(checkpoint: str | Path, patches: list[StainPatch], direction: str,
              ) -> tuple[list[StainPatch], list[EdgeMap]]:
    """Deterministic inference: run patches through one trained generator.

    Returns generated patches (RGB mapped back to [0,1]) and the predicted
    edge maps.
    """
    if direction not in ("he_to_ihc", "ihc_to_he"):
        raise ValueError(f"unknown direction {direction!r}")
    cfg, tensors = load_checkpoint(checkpoint)
    gen_cfg = GeneratorConfig.from_dict(cfg["generator"])
    canny = CannyParams(**cfg["train"]["canny"])
    gen = Generator(gen_cfg)
    prefix = "g_he2ihc." if direction == "he_to_ihc" else "g_ihc2he."
    load_module_arrays(gen, tensors, prefix)
    gen.eval()

    if direction == "he_to_ihc":
        out_stain = Stain(cfg.get("ihc_stain", "CDX2"))
    else:
        out_stain = Stain.HE

    out_patches: list[StainPatch] = []
    out_edges: list[EdgeMap] = []
    with torch.no_grad():
        for patch in patches:
            if patch.size != gen_cfg.image_size:
                raise ValueError(
                    f"patch size {patch.size} incompatible with checkpoint "
                    f"image_size {gen_cfg.image_size}")
            edges = canny_edges(patch.pixels, canny).values
            x = torch.cat([_to_tensor(patch.pixels) * 2 - 1,
                           torch.from_numpy(edges).float()[None]], dim=0)[None]
            rgb, edge = gen(x)
            rgb01 = np.clip((rgb[0].permute(1, 2, 0).numpy() + 1) / 2, 0.0, 1.0)
            out_patches.append(StainPatch(rgb01.astype(np.float64), out_stain,
                                          patch.patient_id, patch.pair_id))
            out_edges.append(EdgeMap(np.clip(edge[0, 0].numpy().astype(np.float64), 0.0, 1.0)))
    return out_patches, out_edges
