#!/usr/bin/env python3
"""
WAE-RNF - Evaluation
Metrics rows (NLL bound, Re-KL, MMD, Log-J, PPL, MI), the metrics CSV, prior
sampling through the flows and latent interpolation between two sentences.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

from data import Corpus, Vocab, make_batch, tokenize
from divergences import DiagGaussian, mmd_gaussian, mutual_information
from flows import stack_forward
from geometry import Curve, curve_length, geodesic
from grad_core import Tensor, no_grad
from nets import TextVAE
from objectives import nll_bound
from rnf import KernelConfig
from rnf_utils import ContractError

logger = logging.getLogger('evaluator')

METRIC_COLUMNS = ['epoch', 'nll', 'kl', 'mmd', 'log_j_raw', 'log_j_reg', 'ppl', 'mi',
                  'split', 'alpha', 'lambda', 'model', 'mi_se', 'tokens', 'rec']


@dataclass
class CorpusPosterior:
    """Per-sentence evaluation terms over a whole split, in corpus order."""
    nll_bound: np.ndarray
    reconstruction: np.ndarray
    kl: np.ndarray
    sum_raw_logdet: np.ndarray
    sum_reg_logdet: Optional[np.ndarray]
    mu: np.ndarray
    log_sigma: np.ndarray
    z0: np.ndarray


def eval_noise(n: int, d: int, eval_seed: int) -> np.ndarray:
    """Fixed per-sentence noise in corpus order, independent of batch size."""
    return np.random.default_rng(eval_seed).standard_normal((n, d))


def score_corpus(model: TextVAE, corpus: Corpus, batch_size: int, eval_seed: int,
                 kernel: Optional[KernelConfig] = None) -> CorpusPosterior:
    noise = eval_noise(len(corpus), model.latent_dim, eval_seed)
    parts = []
    for lo in range(0, len(corpus), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(corpus)))
        batch = make_batch([corpus.sentences[i] for i in idx], idx)
        parts.append((nll_bound(model, batch, noise[idx], kernel), noise[idx]))

    def cat(getter):
        return np.concatenate([getter(p) for p, _ in parts]) if parts else np.zeros(0)

    mu = np.concatenate([p.mu for p, _ in parts]) if parts else np.zeros((0, model.latent_dim))
    log_sigma = np.concatenate([p.log_sigma for p, _ in parts]) if parts else np.zeros((0, model.latent_dim))
    has_reg = bool(parts) and parts[0][0].sum_reg_logdet is not None
    return CorpusPosterior(
        nll_bound=cat(lambda p: p.nll_bound),
        reconstruction=cat(lambda p: p.reconstruction),
        kl=cat(lambda p: p.kl),
        sum_raw_logdet=cat(lambda p: p.sum_raw_logdet),
        sum_reg_logdet=cat(lambda p: p.sum_reg_logdet) if has_reg else None,
        mu=mu,
        log_sigma=log_sigma,
        z0=mu + np.exp(log_sigma) * noise,
    )


def evaluate(model: TextVAE, corpus: Corpus, batch_size: int = 64, eval_seed: int = 1234,
             kernel: Optional[KernelConfig] = None, mi_batch: int = 64, mi_samples: int = 512,
             epoch: int = 0, alpha: float = 0.0, lam: float = 0.0,
             model_name: str = 'model') -> Dict[str, object]:
    """
    One metrics row for ``corpus`` in eval mode.

    PPL = exp(Σ NLL bound / Σ tokens), EOS included in the token count.
    Log-J columns are NaN for models without flows (and log_j_reg without clusters).
    """
    if len(corpus) == 0:
        raise ContractError(f"cannot evaluate an empty {corpus.split} split")
    scores = score_corpus(model, corpus, batch_size, eval_seed, kernel)
    tokens = corpus.num_tokens
    total_nll = float(scores.nll_bound.sum())
    has_flows = bool(model.flows.flows)

    lead = min(mi_batch, len(corpus))
    mmd = float('nan')
    mi = mi_se = float('nan')
    if lead >= 2:
        prior = np.random.default_rng(eval_seed + 1).standard_normal((lead, model.latent_dim))
        with no_grad():
            mmd = mmd_gaussian(scores.z0[:lead], prior).item()
        q = DiagGaussian(Tensor(scores.mu[:lead]), Tensor(scores.log_sigma[:lead]))
        estimate = mutual_information(q, m=mi_samples, rng=np.random.default_rng(eval_seed + 2),
                                      stack=model.flows if has_flows else None)
        mi, mi_se = estimate.value, estimate.stderr

    row = {
        'epoch': epoch,
        'nll': total_nll / len(corpus),
        'kl': float(scores.kl.mean()),
        'mmd': mmd,
        'log_j_raw': float(scores.sum_raw_logdet.mean()) if has_flows else float('nan'),
        'log_j_reg': float(scores.sum_reg_logdet.mean()) if scores.sum_reg_logdet is not None else float('nan'),
        'ppl': math.exp(total_nll / tokens),
        'mi': mi,
        'split': corpus.split,
        'alpha': alpha,
        'lambda': lam,
        'model': model_name,
        'mi_se': mi_se,
        'tokens': tokens,
        'rec': float(scores.reconstruction.mean()),
    }
    logger.info(f"📊 {model_name} [{corpus.split}] epoch {epoch}: NLL {row['nll']:.2f} "
                f"({row['kl']:.2f}), PPL {row['ppl']:.2f}, MI {mi:.3f}")
    return row


def append_metrics(path: str, rows: List[Dict[str, object]]) -> pd.DataFrame:
    """Append rows to the metrics CSV, creating it with the fixed column order."""
    new = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    if os.path.isfile(path):
        frame = pd.concat([pd.read_csv(path), new], ignore_index=True)
    else:
        frame = new
    tmp_path = path + '.tmp'
    frame.to_csv(tmp_path, index=False)
    os.replace(tmp_path, path)
    return frame


def read_metrics(path: str) -> pd.DataFrame:
    if not os.path.isfile(path):
        raise ContractError(f"metrics file not found: {path}")
    frame = pd.read_csv(path)
    missing = [c for c in METRIC_COLUMNS if c not in frame.columns]
    if missing:
        raise ContractError(f"{path}: metrics file lacks columns {missing}")
    return frame


# Collapse experiment thresholds
MIN_CANDIDATE_KL = 2.0
KL_RATIO = 4.0
REC_RATIO = 1.10
MI_SIGMAS = 3.0
MIN_PASSING_SEEDS = 2


@dataclass
class CollapseVerdict:
    """Baseline vs candidate, each at its own best-dev epoch, for one seed."""
    source: str
    baseline_epoch: int
    candidate_epoch: int
    kl_baseline: float
    kl_candidate: float
    rec_baseline: float
    rec_candidate: float
    mi_baseline: float
    mi_candidate: float
    mi_se_baseline: float
    mi_se_candidate: float

    @property
    def keeps_kl(self) -> bool:
        return (self.kl_candidate >= MIN_CANDIDATE_KL
                and self.kl_candidate >= KL_RATIO * self.kl_baseline
                and self.rec_candidate <= REC_RATIO * self.rec_baseline)

    @property
    def mi_margin(self) -> float:
        return MI_SIGMAS * math.sqrt(self.mi_se_baseline ** 2 + self.mi_se_candidate ** 2)

    @property
    def keeps_mi(self) -> bool:
        return self.mi_candidate - self.mi_baseline > self.mi_margin


def best_dev_row(metrics: pd.DataFrame, model_name: str) -> pd.Series:
    """Dev row with the lowest NLL bound among trained epochs (epoch >= 1)."""
    rows = metrics[(metrics['model'] == model_name) & (metrics['split'] == 'dev') & (metrics['epoch'] >= 1)]
    if rows.empty:
        raise ContractError(f"no trained dev rows for model '{model_name}'")
    return rows.loc[rows['nll'].idxmin()]


def collapse_verdict(metrics: pd.DataFrame, baseline: str = 'vae', candidate: str = 'wae-rnf',
                     source: str = '') -> CollapseVerdict:
    base, cand = best_dev_row(metrics, baseline), best_dev_row(metrics, candidate)
    verdict = CollapseVerdict(
        source=source,
        baseline_epoch=int(base['epoch']), candidate_epoch=int(cand['epoch']),
        kl_baseline=float(base['kl']), kl_candidate=float(cand['kl']),
        rec_baseline=float(base['rec']), rec_candidate=float(cand['rec']),
        mi_baseline=float(base['mi']), mi_candidate=float(cand['mi']),
        mi_se_baseline=float(base['mi_se']), mi_se_candidate=float(cand['mi_se']),
    )
    logger.info(f"🔍 {source or 'run'}: KL {verdict.kl_candidate:.2f} vs {verdict.kl_baseline:.2f}, "
                f"rec {verdict.rec_candidate:.2f} vs {verdict.rec_baseline:.2f}, "
                f"MI {verdict.mi_candidate:.3f} vs {verdict.mi_baseline:.3f} (margin {verdict.mi_margin:.3f})")
    return verdict


@dataclass
class CollapseReport:
    verdicts: List[CollapseVerdict]

    @property
    def kl_passes(self) -> int:
        return sum(v.keeps_kl for v in self.verdicts)

    @property
    def mi_passes(self) -> int:
        return sum(v.keeps_mi for v in self.verdicts)

    @property
    def passed(self) -> bool:
        return self.kl_passes >= MIN_PASSING_SEEDS and self.mi_passes >= MIN_PASSING_SEEDS


def check_collapse(metrics_paths: List[str], baseline: str = 'vae', candidate: str = 'wae-rnf') -> CollapseReport:
    """One verdict per metrics file (one seed each, both models inside)."""
    verdicts = [collapse_verdict(read_metrics(p), baseline, candidate, source=p) for p in metrics_paths]
    report = CollapseReport(verdicts)
    status = '✅' if report.passed else '❌'
    logger.info(f"{status} collapse check: KL kept in {report.kl_passes}/{len(verdicts)} seeds, "
                f"MI ordered in {report.mi_passes}/{len(verdicts)} seeds")
    return report


@dataclass
class SampleResult:
    sentences: List[str]

    @property
    def distinct_ratio(self) -> float:
        if not self.sentences:
            return 0.0
        return len(set(self.sentences)) / len(self.sentences)


def sample(model: TextVAE, vocab: Vocab, n: int, seed: int, mode: str = 'greedy',
           temperature: float = 1.0, max_len: int = 50) -> SampleResult:
    """z ~ N(0, I), z' = F(z), decode; deterministic under ``seed``."""
    if n == 0:
        return SampleResult([])
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, model.latent_dim))
    with no_grad():
        z_t, _ = stack_forward(model.flows, Tensor(z))
    ids = model.decode_sample(z_t.data, max_len=max_len, mode=mode, temperature=temperature, rng=rng)
    return SampleResult([vocab.to_text(seq) for seq in ids])


def write_samples(path: str, result: SampleResult) -> None:
    tmp_path = path + '.tmp'
    with open(tmp_path, 'w', encoding='utf-8') as f:
        for sentence in result.sentences:
            f.write(sentence + '\n')
    os.replace(tmp_path, path)


@dataclass
class Interpolation:
    geodesic_sentences: List[str]
    linear_sentences: List[str]
    geodesic_length: float
    linear_length: float
    curve: Curve


def encode_sentences(model: TextVAE, vocab: Vocab, sentences: List[str]) -> np.ndarray:
    """Posterior means of raw text sentences (eval mode)."""
    batch = make_batch([np.array(vocab.encode(tokenize(s)), dtype=np.int64) for s in sentences])
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            q = model.encode(batch.ids, batch.mask)
    finally:
        model.training = was_training
    return q.mu.data.copy()


def _decode_along(model: TextVAE, vocab: Vocab, points: np.ndarray, max_len: int) -> List[str]:
    with no_grad():
        z_t, _ = stack_forward(model.flows, Tensor(points))
    return [vocab.to_text(seq) for seq in model.decode_sample(z_t.data, max_len=max_len)]


def interpolate(model: TextVAE, vocab: Vocab, sentence_a: str, sentence_b: str, steps: int = 8,
                segments: int = 32, iters: int = 300, max_len: int = 50) -> Interpolation:
    """Greedy decodes along the geodesic and along the straight line between two sentences' codes."""
    if steps < 2:
        raise ContractError(f"interpolation needs at least 2 steps, got {steps}")
    za, zb = encode_sentences(model, vocab, [sentence_a, sentence_b])
    curve = geodesic(model.flows, za, zb, N=segments, iters=iters)
    line = Curve.straight(za, zb, segments)
    pick = np.round(np.linspace(0, segments, steps)).astype(int)
    return Interpolation(
        geodesic_sentences=_decode_along(model, vocab, curve.points[pick], max_len),
        linear_sentences=_decode_along(model, vocab, line.points[pick], max_len),
        geodesic_length=curve_length(model.flows, curve),
        linear_length=curve_length(model.flows, line),
        curve=curve,
    )
