#!/usr/bin/env python3
"""
WAE-RNF - Trainer
Adam updates on the configured objective with annealing, per-epoch metrics,
best/last checkpoints, and the plain-VAE pre-training phase that gathers the
latent clusters used by the kernel-regularized flows.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from tqdm import tqdm

from checkpoint_store import Checkpoint, load_checkpoint, save_checkpoint
from data import Batch, Corpus, Vocab, batcher, load_corpus, load_splits, prefetch, \
    synthetic_grammar
from evaluator import append_metrics, evaluate, score_corpus
from grad_core import Tensor, backward
from nets import DecoderConfig, TextVAE
from objectives import WAE_OBJECTIVES, LossBreakdown, anneal, objective_loss
from rnf import ClusterSet, gather_clusters, kernel_config_from
from rnf_utils import ConfigError, NonFiniteError, NumericalAbort, ensure_output_dir
from run_config import RunConfig, config_from_dict

logger = logging.getLogger('trainer')


class Adam:
    """Adam over a named parameter dict; moments are float64 arrays keyed like the params."""

    def __init__(self, params: Dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros(p.shape) for name, p in params.items()}
        self.v = {name: np.zeros(p.shape) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def load_state(self, t: int, m: Dict[str, np.ndarray], v: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(m)
        if missing:
            raise ConfigError(f"checkpoint lacks Adam moments for {sorted(missing)}")
        self.t = t
        self.m = {name: np.array(m[name]) for name in self.params}
        self.v = {name: np.array(v[name]) for name in self.params}


def clip_gradients(params: Dict[str, Tensor], max_norm: float) -> Tuple[float, bool]:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
        return norm, True
    return norm, False


def load_data(cfg: RunConfig, vocab: Optional[Vocab] = None) -> Dict[str, Corpus]:
    """Corpus splits from ``cfg.data_dir``, or the synthetic grammar when none is set."""
    if cfg.data_dir:
        if vocab is None:
            return load_splits(cfg.data_dir, cfg.vocab_cap)
        splits = {}
        for split in ('train', 'dev', 'test'):
            path = os.path.join(cfg.data_dir, f"{split}.txt")
            if os.path.exists(path):
                splits[split] = load_corpus(path, vocab, split)
        return splits
    n = cfg.synthetic_sentences
    held_out = max(2, n // 10)
    return {
        'train': synthetic_grammar(n, cfg.seed, 'train'),
        'dev': synthetic_grammar(held_out, cfg.seed + 1, 'dev'),
        'test': synthetic_grammar(held_out, cfg.seed + 2, 'test'),
    }


def build_model(cfg: RunConfig, vocab_size: int, rng: np.random.Generator,
                num_flows: Optional[int] = None) -> TextVAE:
    return TextVAE.build(
        vocab_size, rng, embed_dim=cfg.embed_dim, hidden=cfg.hidden, latent_dim=cfg.latent_dim,
        mlp_hidden=cfg.mlp_hidden, num_flows=cfg.flow_count if num_flows is None else num_flows,
        decoder_cfg=DecoderConfig(cfg.injection, cfg.dropout, cfg.embed_dim),
    )


@dataclass
class TrainState:
    """Model, optimizer and every counter needed to continue a run bit-for-bit."""
    model: TextVAE
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    data_pass: int = 0
    batch_in_pass: int = 0
    best_dev: Optional[float] = None
    phase: str = 'main'
    history: List[Dict[str, object]] = field(default_factory=list)


class Trainer:
    """Runs one configured experiment end to end."""

    def __init__(self, cfg: RunConfig, splits: Dict[str, Corpus], out_dir: Optional[str] = None,
                 state: Optional[TrainState] = None, progress: bool = True):
        if 'train' not in splits or len(splits['train']) < 2:
            raise ConfigError("training needs a train split with at least 2 sentences")
        self.cfg = cfg
        self.train_corpus = splits['train']
        self.dev_corpus = splits.get('dev') or self.train_corpus.subset(cfg.eval_train_size)
        self.vocab = self.train_corpus.vocab
        self.out_dir = ensure_output_dir(out_dir or cfg.out)
        self.kernel = kernel_config_from(cfg.kernel, cfg.kernel_scales, cfg.kernel_beta, cfg.latent_dim)
        self.schedule = cfg.schedule()
        self.progress = progress
        self.state = state
        self._pass_batches: Optional[Iterator[Batch]] = None
        self._cursor: Tuple[int, int] = (-1, -1)

    # -- paths -------------------------------------------------------------

    @property
    def metrics_path(self) -> str:
        return os.path.join(self.out_dir, 'metrics.csv')

    @property
    def last_checkpoint(self) -> str:
        return os.path.join(self.out_dir, 'last.npz')

    @property
    def best_checkpoint(self) -> str:
        return os.path.join(self.out_dir, 'best.npz')

    # -- setup -------------------------------------------------------------

    def init_state(self, clusters: Optional[ClusterSet] = None) -> TrainState:
        rng = np.random.default_rng(self.cfg.seed)
        model = build_model(self.cfg, self.vocab.size, rng)
        model.clusters = clusters
        optimizer = Adam(model.parameters(), self.cfg.lr, self.cfg.adam_beta1,
                         self.cfg.adam_beta2, self.cfg.adam_eps)
        self.state = TrainState(model, optimizer, rng)
        return self.state

    def resolve_clusters(self) -> Optional[ClusterSet]:
        """Load the cluster artifact, or run the pre-training phase to gather one."""
        if self.cfg.objective != 'wae-rnf':
            return None
        if self.cfg.clusters_path is not None:
            if not os.path.isfile(self.cfg.clusters_path):
                raise ConfigError(f"cluster artifact not found: {self.cfg.clusters_path}")
            clusters = ClusterSet.load(self.cfg.clusters_path)
        else:
            clusters = self.pretrain_clusters()
        if clusters.dim != self.cfg.latent_dim:
            raise ConfigError(f"cluster width {clusters.dim} does not match latent_dim {self.cfg.latent_dim}")
        return clusters

    def pretrain_clusters(self) -> ClusterSet:
        """Train a plain VAE for the pre-training budget and k-means its posterior means."""
        epochs = self.cfg.pretrain_epochs
        logger.info(f"🧪 Pre-training plain VAE for {epochs} epochs to gather {self.cfg.num_clusters} clusters")
        pre_cfg = self.cfg.model_copy(update={
            'objective': 'vae', 'epochs': epochs, 'clusters_path': None, 'run_label': 'pretrain-vae',
        })
        pre_dir = os.path.join(self.out_dir, 'pretrain')
        pre = Trainer(pre_cfg, {'train': self.train_corpus, 'dev': self.dev_corpus}, pre_dir,
                      progress=self.progress)
        pre.init_state()
        pre.train()
        scores = score_corpus(pre.state.model, self.train_corpus, self.cfg.eval_batch_size, self.cfg.eval_seed)
        clusters = gather_clusters(scores.mu, self.cfg.num_clusters, seed=self.cfg.seed)
        clusters.save(os.path.join(self.out_dir, 'clusters.bin'))
        return clusters

    # -- data --------------------------------------------------------------

    def _batches_per_pass(self) -> int:
        return max(1, len(self.train_corpus) // self.cfg.batch_size)

    def next_batch(self) -> Batch:
        """Batch at the current data cursor; full batches only, order fixed by (seed, pass)."""
        s = self.state
        if s.batch_in_pass >= self._batches_per_pass():
            s.data_pass += 1
            s.batch_in_pass = 0
        if self._cursor != (s.data_pass, s.batch_in_pass):
            self._pass_batches = batcher(self.train_corpus, self.cfg.batch_size, self.cfg.seed,
                                         pass_index=s.data_pass, start=s.batch_in_pass)
        batch = next(self._pass_batches)
        s.batch_in_pass += 1
        self._cursor = (s.data_pass, s.batch_in_pass)
        return batch

    def _stream(self, steps: int):
        for _ in range(steps):
            yield self.next_batch()

    # -- training ----------------------------------------------------------

    def step(self, batch: Batch, epoch: int) -> Tuple[LossBreakdown, float, bool]:
        """One Adam update trained with anneal(epoch)."""
        s = self.state
        model = s.model
        alpha, lam = anneal(epoch, self.schedule)
        B, d = len(batch), model.latent_dim
        noise = s.rng.standard_normal((B, d))
        prior = s.rng.standard_normal((B, d)) if self.cfg.objective in WAE_OBJECTIVES else None
        model.train()
        model.zero_grad()
        try:
            loss = objective_loss(self.cfg.objective, model, batch, noise, prior, alpha, lam,
                                  self.kernel, s.rng, self.cfg.kernel_regularized)
            backward(loss.total)
        except NonFiniteError as e:
            raise NumericalAbort(f"non-finite value at step {s.step + 1}: {e}") from e
        params = s.optimizer.params
        if not all(p.grad is None or np.all(np.isfinite(p.grad)) for p in params.values()):
            raise NumericalAbort(f"non-finite gradient at step {s.step + 1}")
        norm, clipped = clip_gradients(params, self.cfg.clip_norm)
        if clipped:
            logger.debug(f"Gradient norm {norm:.3f} clipped to {self.cfg.clip_norm} at step {s.step + 1}")
        s.optimizer.step()
        s.step += 1
        return loss, norm, clipped

    def run_epoch(self, epoch: int) -> Dict[str, float]:
        steps = self.cfg.steps_per_epoch
        stream = self._stream(steps)
        if self.cfg.prefetch_depth > 0:
            stream = prefetch(stream, self.cfg.prefetch_depth)
        totals = {'total': 0.0, 'nll': 0.0, 'kl': 0.0, 'mmd': 0.0}
        clipped_steps = 0
        bar = tqdm(stream, total=steps, desc=f"{self.cfg.run_name} epoch {epoch}",
                   disable=not self.progress, leave=False)
        for batch in bar:
            loss, _, clipped = self.step(batch, epoch)
            values = loss.values()
            for key in totals:
                totals[key] += values[key]
            clipped_steps += int(clipped)
            bar.set_postfix(loss=f"{values['total']:.3f}")
        if clipped_steps:
            logger.warning(f"⚠️  Gradient clipping triggered on {clipped_steps}/{steps} steps in epoch {epoch}")
        return {key: value / steps for key, value in totals.items()}

    def evaluation_rows(self, epoch: int) -> List[Dict[str, object]]:
        alpha, lam = anneal(epoch, self.schedule)
        kernel = self.kernel if self.state.model.clusters is not None else None
        rows = []
        for corpus in (self.train_corpus.subset(self.cfg.eval_train_size), self.dev_corpus):
            rows.append(evaluate(self.state.model, corpus, self.cfg.eval_batch_size, self.cfg.eval_seed,
                                 kernel, self.cfg.mi_batch, self.cfg.mi_samples, epoch, alpha, lam,
                                 self.cfg.run_name))
        return rows

    def train(self) -> TrainState:
        """Run the remaining epochs; metrics and checkpoints land in ``out_dir``."""
        if self.state is None:
            self.init_state(self.resolve_clusters())
        s = self.state
        if s.epoch == 0 and not os.path.isfile(self.metrics_path):
            rows = self.evaluation_rows(0)
            append_metrics(self.metrics_path, rows)
            s.history.extend(rows)
            self.save(self.last_checkpoint)

        for epoch in range(s.epoch + 1, self.cfg.epochs + 1):
            try:
                means = self.run_epoch(epoch)
            except NumericalAbort as e:
                logger.error(f"❌ Numerical abort in epoch {epoch}: {e}; "
                             f"last good checkpoint kept at {self.last_checkpoint}")
                raise
            s.epoch = epoch
            rows = self.evaluation_rows(epoch)
            append_metrics(self.metrics_path, rows)
            s.history.extend(rows)
            dev_nll = float(rows[-1]['nll'])
            self.save(self.last_checkpoint)
            if s.best_dev is None or dev_nll < s.best_dev:
                s.best_dev = dev_nll
                self.save(self.best_checkpoint)
            alpha, lam = anneal(epoch, self.schedule)
            logger.info(f"✅ Epoch {epoch}/{self.cfg.epochs}: loss {means['total']:.3f} "
                        f"(nll {means['nll']:.3f}, kl {means['kl']:.3f}, mmd {means['mmd']:.4f}), "
                        f"α={alpha:.4f}, λ={lam:.4f}, dev NLL {dev_nll:.3f}")
        return s

    # -- persistence -------------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        s = self.state
        model = s.model
        return Checkpoint(
            config=self.cfg.model_dump(mode='json'),
            vocab=list(self.vocab.tokens),
            rng_state=s.rng.bit_generator.state,
            epoch=s.epoch, step=s.step, data_pass=s.data_pass, batch_in_pass=s.batch_in_pass,
            adam_step=s.optimizer.t,
            params={name: p.data for name, p in model.parameters().items()},
            adam_m=s.optimizer.m, adam_v=s.optimizer.v,
            buffers=model.buffers(),
            clusters=None if model.clusters is None else model.clusters.centers,
            phase=s.phase, best_dev=s.best_dev,
        )

    def save(self, path: str) -> None:
        save_checkpoint(path, self.checkpoint())
        self.vocab.save(os.path.join(os.path.dirname(os.path.abspath(path)), 'vocab.tsv'))

    @classmethod
    def from_checkpoint(cls, path: str, splits: Optional[Dict[str, Corpus]] = None,
                        out_dir: Optional[str] = None, progress: bool = True,
                        overrides: Optional[Dict[str, object]] = None) -> 'Trainer':
        ckpt = load_checkpoint(path)
        stored = dict(ckpt.config)
        stored.update({k: v for k, v in (overrides or {}).items() if v is not None})
        cfg = config_from_dict(stored)
        vocab = Vocab(list(ckpt.vocab))
        if splits is None:
            splits = load_data(cfg, vocab)
        if splits['train'].vocab.tokens != vocab.tokens:
            raise ConfigError(f"{path}: training vocabulary differs from the checkpoint's")
        trainer = cls(cfg, splits, out_dir or os.path.dirname(os.path.abspath(path)), progress=progress)
        trainer.state = restore_state(ckpt, cfg, vocab.size)
        return trainer


def restore_model(ckpt: Checkpoint, cfg: RunConfig, vocab_size: int) -> TextVAE:
    """Rebuild the architecture and copy the stored blocks into it."""
    num_flows = len({name.split('.')[1] for name in ckpt.params if name.startswith('flows.')})
    model = build_model(cfg, vocab_size, np.random.default_rng(0), num_flows=num_flows)
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise ConfigError(f"checkpoint parameters do not match the model: "
                          f"{sorted(set(params) ^ set(ckpt.params))}")
    for name, p in params.items():
        if p.shape != ckpt.params[name].shape:
            raise ConfigError(f"parameter '{name}': checkpoint shape {ckpt.params[name].shape} != {p.shape}")
        p.data = np.array(ckpt.params[name])
    model.load_buffers(ckpt.buffers)
    if ckpt.clusters is not None:
        model.clusters = ClusterSet(ckpt.clusters)
    return model


def restore_state(ckpt: Checkpoint, cfg: RunConfig, vocab_size: int) -> TrainState:
    model = restore_model(ckpt, cfg, vocab_size)
    optimizer = Adam(model.parameters(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    optimizer.load_state(ckpt.adam_step, ckpt.adam_m, ckpt.adam_v)
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    return TrainState(model, optimizer, rng, epoch=ckpt.epoch, step=ckpt.step,
                      data_pass=ckpt.data_pass, batch_in_pass=ckpt.batch_in_pass,
                      best_dev=ckpt.best_dev, phase=ckpt.phase)
