"""Losses, the training loop, decoder pretraining and the finite-difference gradient check."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .data import MovieRecord, Window, sample_windows
from .detector import CandidateSet, label_candidates
from .generation import ToyDecoder
from .model import AdModel, ModelConfig
from .text import Vocabulary

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1 or self.gamma < 0:
            raise ValueError("focal loss needs alpha in (0, 1] and gamma >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-4
    warmup_steps: int = 100
    weight_decay: float = 0.0
    seed: int = 0
    cut_per_event: int = 2
    random_per_movie: int = 6
    # leading epochs that optimise the detection terms alone; the lr schedule restarts after them
    det_only_epochs: int = 0
    det_lr: float | None = None
    # hold enhance, det_visual and head_vod fixed while the joint objective trains the rest
    freeze_vod_in_joint: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 3e-3
    warmup_steps: int = 100
    seed: int = 0


# --- losses --------------------------------------------------------------------

def focal_loss(p_hat, p, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Mean binary focal loss -alpha_t (1 - p_t)^gamma log p_t."""
    p_hat = torch.as_tensor(p_hat, dtype=torch.float64)
    p = torch.as_tensor(p, dtype=torch.float64)
    if p_hat.shape != p.shape:
        raise ValueError(f"score shape {tuple(p_hat.shape)} != target shape {tuple(p.shape)}")
    if not (torch.isfinite(p_hat).all() and torch.isfinite(p).all()):
        raise ValueError("focal loss received non-finite inputs")
    p_hat = p_hat.clamp(1e-7, 1 - 1e-7)
    pos = p > 0.5
    p_t = torch.where(pos, p_hat, 1 - p_hat)
    alpha_t = torch.where(pos, torch.full_like(p_hat, cfg.alpha), torch.full_like(p_hat, 1 - cfg.alpha))
    return (-alpha_t * (1 - p_t) ** cfg.gamma * torch.log(p_t)).mean()


def token_cross_entropy(rows, gold, mask=None, return_flag: bool = False):
    """Mean -log rows[k, gold[k]] over (unmasked) positions, averaged per sequence.

    Probabilities below 1e-12 at the gold id are clamped; ``return_flag`` reports it.
    """
    rows = torch.as_tensor(rows, dtype=torch.float64)
    gold = torch.as_tensor(np.asarray(gold) if not isinstance(gold, torch.Tensor) else gold, dtype=torch.long)
    picked = torch.gather(rows, -1, gold[..., None])[..., 0]
    clamped = bool((picked.detach() < 1e-12).any())
    nll = -torch.log(picked.clamp(min=1e-12))
    if mask is None:
        loss = nll.mean(-1).mean()
    else:
        mask = mask.to(nll.dtype)
        loss = ((nll * mask).sum(-1) / mask.sum(-1)).mean()
    if clamped:
        log.warning("gold token probability below 1e-12 was clamped")
    return (loss, clamped) if return_flag else loss


# --- batches -------------------------------------------------------------------

@dataclass
class Batch:
    context: torch.Tensor
    clip: torch.Tensor
    target: torch.Tensor
    script: torch.Tensor
    script_mask: torch.Tensor
    gold: torch.Tensor
    gold_mask: torch.Tensor


def script_ids(script: str | None, vocab: Vocabulary, limit: int) -> list[int]:
    ids = vocab.encode(script) if script else [vocab.stop_id]
    return ids[:limit]


def collate(windows: list[Window], cs: CandidateSet, vocab: Vocabulary, script_len: int, max_tokens: int) -> Batch:
    def padded(seqs, width):
        out = np.full((len(seqs), width), vocab.pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            out[i, : len(s)] = s
        return torch.as_tensor(out)

    scripts = [script_ids(w.script, vocab, script_len) for w in windows]
    golds = [script_ids(w.script, vocab, max_tokens) for w in windows]
    s_tok = padded(scripts, script_len)
    g_tok = padded(golds, max(len(g) for g in golds))
    return Batch(
        context=torch.as_tensor(np.stack([w.context for w in windows]), dtype=torch.float64),
        clip=torch.as_tensor(np.stack([w.clip for w in windows]), dtype=torch.float64),
        target=torch.as_tensor(np.stack([label_candidates(w.labels, cs) for w in windows])),
        script=s_tok,
        script_mask=torch.as_tensor(np.arange(script_len)[None] < np.array([len(s) for s in scripts])[:, None]),
        gold=g_tok,
        gold_mask=torch.as_tensor(np.arange(g_tok.shape[1])[None] < np.array([len(g) for g in golds])[:, None]),
    )


# --- objective -----------------------------------------------------------------

@dataclass
class LossTerms:
    det_vod: torch.Tensor
    det_lgd: torch.Tensor
    gen: torch.Tensor

    @property
    def det(self) -> torch.Tensor:
        return self.det_vod + self.det_lgd

    @property
    def total(self) -> torch.Tensor:
        return self.det + self.gen


def total_loss(model: AdModel, batch: Batch, cfg: LossConfig = LossConfig(), with_gen: bool = True) -> LossTerms:
    """Focal VOD + focal LGD (ground-truth script) + teacher-forced token cross-entropy.

    The generation term sees the clip through the suppression weighted by the VOD
    scores, so it back-propagates into the detector.
    """
    v_ctx, v = model.enhance(batch.context, batch.clip)
    x = model.detection_features(v)
    p_vod = model.vod_scores(x)
    p_lgd = model.lgd_scores(x, batch.script, batch.script_mask)
    det_vod = focal_loss(p_vod, batch.target, cfg)
    det_lgd = focal_loss(p_lgd, batch.target, cfg)
    if not with_gen:
        return LossTerms(det_vod, det_lgd, torch.zeros((), dtype=torch.float64))
    prefix = model.prefix(v_ctx, model.suppress(v, p_vod))
    rows = torch.exp(model.decoder.log_probs(prefix, batch.gold[:, :-1]))
    return LossTerms(det_vod, det_lgd, token_cross_entropy(rows, batch.gold, batch.gold_mask))


def lr_at(step: int, peak: float, warmup: int, total: int) -> float:
    """Linear warm-up from 0 to ``peak`` over ``warmup`` steps, then cosine decay to 0 at ``total``."""
    if step < warmup:
        return peak * step / warmup
    progress = min((step - warmup) / max(total - warmup, 1), 1.0)
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    log: list[dict] = field(default_factory=list)
    steps: int = 0
    seconds: float = 0.0

    def jsonl(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def _epoch_batches(movies, model_cfg: ModelConfig, cfg: TrainConfig, rng: np.random.Generator):
    windows = sample_windows(movies, model_cfg.clip_len, model_cfg.context_len, rng,
                             cfg.cut_per_event, cfg.random_per_movie)
    order = rng.permutation(len(windows))
    return [[windows[i] for i in order[j: j + cfg.batch_size]] for j in range(0, len(windows), cfg.batch_size)]


VOD_PATH = ("stacks.enhance.", "stacks.det_visual.", "head_vod.")


def train(model: AdModel, movies: list[MovieRecord], vocab: Vocabulary, cfg: TrainConfig = TrainConfig(),
          loss_cfg: LossConfig = LossConfig(), on_step=None) -> TrainResult:
    """AdamW with linear warm-up + cosine decay; SSM stability clamps after every step."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    mcfg = model.cfg
    params = [p for _, p in model.trainable_parameters()]
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    first = _epoch_batches(movies, mcfg, cfg, rng)
    per_epoch = len(first)
    det_lr = cfg.lr if cfg.det_lr is None else cfg.det_lr
    stages = [(n, gen, peak) for n, gen, peak in ((cfg.det_only_epochs, False, det_lr), (cfg.epochs, True, cfg.lr))
              if n > 0]
    for n_epochs, _, _ in stages:
        if cfg.warmup_steps >= per_epoch * n_epochs:
            raise ValueError(f"warm-up ({cfg.warmup_steps}) must be shorter than a training stage "
                             f"({per_epoch * n_epochs} steps)")
    result = TrainResult()
    t0 = time.perf_counter()
    step = 0
    epoch = 0
    model.train()
    for n_epochs, with_gen, peak in stages:
        total = per_epoch * n_epochs
        frozen = with_gen and cfg.freeze_vod_in_joint
        for name, p in model.trainable_parameters():
            p.requires_grad_(not (frozen and name.startswith(VOD_PATH)))
        for stage_step in range(total):
            if stage_step % per_epoch == 0:
                batches = first if epoch == 0 else _epoch_batches(movies, mcfg, cfg, rng)
                epoch += 1
            windows = batches[stage_step % per_epoch]
            lr = lr_at(stage_step, peak, cfg.warmup_steps, total)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = collate(windows, model.cs, vocab, mcfg.script_len, mcfg.max_tokens)
            terms = total_loss(model, batch, loss_cfg, with_gen=with_gen)
            loss = terms.total
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became non-finite at step {step} (epoch {epoch}, lr {lr:.3g}): "
                    f"det={terms.det.item()!r} gen={terms.gen.item()!r}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            model.clamp_()
            rec = {"step": step, "lr": lr, "loss_det": terms.det.item(), "loss_gen": terms.gen.item(),
                   "loss_total": loss.item()}
            result.log.append(rec)
            if on_step is not None:
                on_step(rec)
            step += 1
    for _, p in model.trainable_parameters():
        p.requires_grad_(True)
    model.eval()
    result.steps = step
    result.seconds = time.perf_counter() - t0
    return result


# --- decoder pretraining -------------------------------------------------------

def pretrain_decoder(decoder: ToyDecoder, movies: list[MovieRecord], vocab: Vocabulary, model_cfg: ModelConfig,
                     cfg: PretrainConfig = PretrainConfig()) -> list[float]:
    """Fit the decoder on (raw window features, script) pairs through throwaway linear adapters.

    The adapters are discarded afterwards; the caller freezes the decoder.
    """
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    width = model_cfg.width
    adapters = [torch.nn.Parameter(torch.as_tensor(np.eye(width) + rng.normal(0, 0.1, (width, width))))
                for _ in range(2)]
    for p in decoder.parameters():
        p.requires_grad_(True)
    params = list(decoder.parameters()) + adapters
    opt = torch.optim.AdamW(params, lr=cfg.lr, weight_decay=0.0)
    pool: list[Window] = []
    losses = []
    for step in range(cfg.steps):
        if len(pool) < cfg.batch_size:
            fresh = sample_windows(movies, model_cfg.clip_len, model_cfg.context_len, rng)
            pool = [fresh[i] for i in rng.permutation(len(fresh))] + pool
        windows, pool = pool[: cfg.batch_size], pool[cfg.batch_size:]
        golds = [script_ids(w.script, vocab, model_cfg.max_tokens) for w in windows]
        g = np.full((len(golds), max(map(len, golds))), vocab.pad_id, dtype=np.int64)
        for i, s in enumerate(golds):
            g[i, : len(s)] = s
        gold = torch.as_tensor(g)
        mask = gold != vocab.pad_id
        ctx = torch.as_tensor(np.stack([w.context for w in windows])) @ adapters[0]
        clip = torch.as_tensor(np.stack([w.clip for w in windows])) @ adapters[1]
        logp = decoder.log_probs(torch.cat([ctx, clip], dim=1), gold[:, :-1])
        nll = -torch.gather(logp, -1, gold[..., None])[..., 0]
        loss = ((nll * mask).sum(-1) / mask.sum(-1)).mean()
        for group in opt.param_groups:
            group["lr"] = lr_at(step, cfg.lr, cfg.warmup_steps, cfg.steps)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    decoder.freeze()
    return losses


# --- gradient check ------------------------------------------------------------

TINY = ModelConfig(width=4, state_dim=4, n_layers=1, clip_len=4, context_len=4, script_len=5, top_k=3,
                   vocab_size=8, decoder_heads=2, max_tokens=6, seed=0)


def tiny_batch(cfg: ModelConfig, rng: np.random.Generator, size: int = 2) -> Batch:
    """Random windows for ``cfg`` with one event per window and random 3-token scripts."""
    from .detector import build_candidates

    cs = build_candidates(cfg.clip_len)
    target = np.zeros((size, cs.size))
    gold = np.zeros((size, 4), dtype=np.int64)
    for i in range(size):
        target[i, rng.integers(cs.size)] = 1.0
        gold[i, :3] = rng.integers(2, cfg.vocab_size, 3)
        gold[i, 3] = 1
    script = np.zeros((size, cfg.script_len), dtype=np.int64)
    script[:, :4] = gold
    return Batch(
        context=torch.as_tensor(rng.normal(size=(size, cfg.context_len, cfg.width))),
        clip=torch.as_tensor(rng.normal(size=(size, cfg.clip_len, cfg.width))),
        target=torch.as_tensor(target),
        script=torch.as_tensor(script),
        script_mask=torch.as_tensor(script != 0),
        gold=torch.as_tensor(gold),
        gold_mask=torch.ones(size, 4, dtype=torch.bool),
    )


def topk_margin(model: AdModel, batch: Batch) -> float:
    with torch.no_grad():
        _, v = model.enhance(batch.context, batch.clip)
        scores = model.vod_scores(model.detection_features(v))
    s = torch.sort(scores, dim=-1, descending=True).values
    k = model.cfg.top_k
    return float((s[:, k - 1] - s[:, k]).min())


def param_group(name: str) -> str:
    parts = name.split(".")
    return ".".join(parts[:2]) if parts[0] == "stacks" else parts[0]


@dataclass
class GradcheckReport:
    max_rel_err: dict[str, float]
    margin: float
    seed: int
    bypass_head_grad_zero: bool
    head_grad_from_gen: float

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values())

    def passed(self, tol: float = 1e-4) -> bool:
        return self.worst <= tol and self.bypass_head_grad_zero and self.head_grad_from_gen > 0


def gradient_check(cfg: ModelConfig = TINY, seed: int = 0, step: float = 1e-5, min_margin: float = 1e-3,
                   max_tries: int = 50) -> GradcheckReport:
    """Compare autograd gradients of the total loss with central differences on every trainable tensor.

    Seeds are advanced until every window's k-th and (k+1)-th VOD scores differ by
    more than ``min_margin`` so the hard top-k selection is locally constant.
    """
    for attempt in range(max_tries):
        s = seed + attempt
        model = AdModel(ModelConfig(**{**cfg.to_dict(), "seed": s}))
        batch = tiny_batch(model.cfg, np.random.default_rng(s))
        margin = topk_margin(model, batch)
        if margin > min_margin:
            break
    else:
        raise RuntimeError("no seed gave a top-k margin above the threshold")

    def loss_value() -> torch.Tensor:
        return total_loss(model, batch).total

    named = model.trainable_parameters()
    model.zero_grad(set_to_none=True)
    loss_value().backward()
    analytic = {name: p.grad.detach().clone() for name, p in named}

    errors: dict[str, float] = {}
    pairs: dict[str, tuple[list, list]] = {}
    with torch.no_grad():
        for name, p in named:
            flat = p.data.view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_value().item()
                flat[i] = orig - step
                down = loss_value().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            group = param_group(name)
            a_all, n_all = pairs.setdefault(group, ([], []))
            a_all.append(analytic[name].view(-1))
            n_all.append(numeric)
    # scaled per group: single tensors such as a_re can carry gradients near 1e-9,
    # where central-difference roundoff alone is a sizeable fraction
    for group, (a_all, n_all) in pairs.items():
        a, numeric = torch.cat(a_all), torch.cat(n_all)
        scale = max(a.abs().max().item(), numeric.abs().max().item(), 1e-10)
        errors[group] = (a - numeric).abs().max().item() / scale

    def gen_head_grad(bypass: bool) -> float:
        model.bypass_suppression = bypass
        model.zero_grad(set_to_none=True)
        total_loss(model, batch).gen.backward()
        model.bypass_suppression = False
        grads = [p.grad for p in model.head_vod.parameters()]
        return sum(0.0 if g is None else g.abs().sum().item() for g in grads)

    return GradcheckReport(errors, margin, s, gen_head_grad(True) == 0.0, gen_head_grad(False))
