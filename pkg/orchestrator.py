#!/usr/bin/env python3
"""
WAE-RNF - Experiment Orchestrator
Command-line entry point: train, eval, sample, clusters, geodesic, plots, interpolate, check.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 collapse check failed.
"""

import os
import sys

# Load environment variables
from dotenv import load_dotenv
load_dotenv()

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), 'src'))

import argparse
import logging
from datetime import datetime, timezone
from typing import Dict, List, Optional

import numpy as np
from pydantic import ValidationError

from evaluator import (append_metrics, check_collapse, encode_sentences, evaluate, interpolate, sample, score_corpus,
                       write_samples)
from geometry import Curve, curve_energy, curve_length, geodesic
from plots import curvature_heatmap, energy_trace_csv, mi_bar_chart, write_curve_csv
from rnf import gather_clusters
from rnf_utils import ConfigError, NonFiniteError, NumericalAbort, RnfError, ensure_output_dir, setup_logging
from run_config import load_run_config
from trainer import Trainer, load_data

logger = logging.getLogger('orchestrator')

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_CHECK_FAILED = 4


def _vector(text: str) -> np.ndarray:
    try:
        return np.array([float(x) for x in text.split(',')], dtype=np.float64)
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got '{text}'") from None


class ExperimentOrchestrator:
    """Dispatches CLI subcommands onto the trainer, evaluator and geometry modules."""

    def __init__(self, args: argparse.Namespace):
        self.args = args

    def overrides(self) -> Dict[str, object]:
        a = self.args
        return {
            'seed': a.seed,
            'data_dir': a.data_dir,
            'checkpoint': a.checkpoint,
            'out': a.out,
            'objective': getattr(a, 'objective', None),
            'epochs': getattr(a, 'epochs', None),
        }

    def out_dir(self, fallback: str) -> str:
        return ensure_output_dir(self.args.out or fallback)

    def load_trainer(self) -> Trainer:
        if not self.args.checkpoint:
            raise ConfigError(f"'{self.args.command}' needs --checkpoint")
        if not os.path.isfile(self.args.checkpoint):
            raise ConfigError(f"checkpoint not found: {self.args.checkpoint}")
        overrides = {'data_dir': self.args.data_dir}
        out = self.args.out or os.path.dirname(os.path.abspath(self.args.checkpoint))
        return Trainer.from_checkpoint(self.args.checkpoint, out_dir=out, progress=False, overrides=overrides)

    # -- subcommands -------------------------------------------------------

    def run_train(self) -> int:
        logger.info("🚀 Starting training run...")
        start = datetime.now(timezone.utc)
        if self.args.checkpoint and os.path.isfile(self.args.checkpoint):
            trainer = Trainer.from_checkpoint(self.args.checkpoint, out_dir=self.args.out,
                                              progress=not self.args.quiet)
            logger.info(f"↩️  Resuming from {self.args.checkpoint} at epoch {trainer.state.epoch}")
        else:
            cfg = load_run_config(self.args.config, self.overrides())
            trainer = Trainer(cfg, load_data(cfg), cfg.out, progress=not self.args.quiet)
        state = trainer.train()
        duration = (datetime.now(timezone.utc) - start).total_seconds()
        logger.info(f"✅ Training complete in {duration:.1f}s: {state.epoch} epochs, {state.step} steps, "
                    f"best dev NLL {state.best_dev}")
        logger.info(f"   Metrics: {trainer.metrics_path}")
        return EXIT_OK

    def run_eval(self) -> int:
        trainer = self.load_trainer()
        split = self.args.split
        splits = load_data(trainer.cfg, trainer.vocab)
        if split not in splits:
            raise ConfigError(f"no '{split}' split available")
        cfg = trainer.cfg
        model = trainer.state.model
        kernel = trainer.kernel if model.clusters is not None else None
        row = evaluate(model, splits[split], cfg.eval_batch_size, cfg.eval_seed, kernel,
                       cfg.mi_batch, cfg.mi_samples, trainer.state.epoch, model_name=cfg.run_name)
        path = os.path.join(trainer.out_dir, 'eval_metrics.csv')
        append_metrics(path, [row])
        print(f"{cfg.run_name} [{split}]  NLL {row['nll']:.1f} ({row['kl']:.1f})  PPL {row['ppl']:.1f}  "
              f"MI {row['mi']:.3f}  Log-J {row['log_j_raw']:.3f}")
        return EXIT_OK

    def run_sample(self) -> int:
        trainer = self.load_trainer()
        a = self.args
        result = sample(trainer.state.model, trainer.vocab, a.n, a.seed if a.seed is not None else 0,
                        a.mode, a.temperature, a.max_len)
        path = a.output or os.path.join(trainer.out_dir, 'samples.txt')
        write_samples(path, result)
        logger.info(f"📝 Wrote {len(result.sentences)} samples to {path}")
        print(f"distinct-sentence ratio: {result.distinct_ratio:.3f} ({len(set(result.sentences))}/"
              f"{len(result.sentences)})")
        return EXIT_OK

    def run_clusters(self) -> int:
        if self.args.checkpoint:
            trainer = self.load_trainer()
            cfg = trainer.cfg
            scores = score_corpus(trainer.state.model, trainer.train_corpus, cfg.eval_batch_size, cfg.eval_seed)
            clusters = gather_clusters(scores.mu, self.args.k or cfg.num_clusters, seed=cfg.seed)
            path = self.args.output or os.path.join(trainer.out_dir, 'clusters.bin')
            clusters.save(path)
        else:
            cfg = load_run_config(self.args.config, {**self.overrides(), 'objective': 'wae-rnf',
                                                     'clusters_path': None})
            trainer = Trainer(cfg, load_data(cfg), cfg.out, progress=not self.args.quiet)
            clusters = trainer.pretrain_clusters()
            path = os.path.join(trainer.out_dir, 'clusters.bin')
        print(f"{clusters.K} clusters (d={clusters.dim}) written to {path}")
        return EXIT_OK

    def _endpoints(self, trainer: Trainer) -> List[np.ndarray]:
        a = self.args
        if a.sentence_a and a.sentence_b:
            return list(encode_sentences(trainer.state.model, trainer.vocab, [a.sentence_a, a.sentence_b]))
        if a.za and a.zb:
            return [_vector(a.za), _vector(a.zb)]
        raise ConfigError("geodesic needs --za/--zb or --sentence-a/--sentence-b")

    def run_geodesic(self) -> int:
        trainer = self.load_trainer()
        stack = trainer.state.model.flows
        za, zb = self._endpoints(trainer)
        curve = geodesic(stack, za, zb, N=self.args.segments, iters=self.args.iters)
        line = Curve.straight(za, zb, self.args.segments)
        out = self.out_dir(trainer.out_dir)
        write_curve_csv(os.path.join(out, 'geodesic.csv'), curve)
        energy_trace_csv(os.path.join(out, 'geodesic_energy.csv'), {'geodesic': curve.energy_trace})
        curvature_heatmap(stack, os.path.join(out, 'geodesic.svg'),
                          curves={'geodesic': curve, 'straight': line})
        print(f"geodesic length {curve_length(stack, curve):.6f} (straight {curve_length(stack, line):.6f}), "
              f"energy {curve_energy(stack, curve):.6f}, converged={curve.converged}")
        return EXIT_OK

    def run_plots(self) -> int:
        a = self.args
        out = self.out_dir('runs/plots')
        if not a.metrics and not a.checkpoint:
            raise ConfigError("plots needs --metrics and/or --checkpoint")
        if a.metrics:
            if not os.path.isfile(a.metrics):
                raise ConfigError(f"metrics CSV not found: {a.metrics}")
            mi_bar_chart(a.metrics, os.path.join(out, 'mi.svg'), a.split)
        if a.checkpoint:
            trainer = self.load_trainer()
            curvature_heatmap(trainer.state.model.flows, os.path.join(out, 'curvature.svg'))
        return EXIT_OK

    def run_interpolate(self) -> int:
        trainer = self.load_trainer()
        a = self.args
        result = interpolate(trainer.state.model, trainer.vocab, a.sentence_a, a.sentence_b,
                             steps=a.steps, segments=a.segments, iters=a.iters)
        print(f"geodesic (length {result.geodesic_length:.4f}):")
        for sentence in result.geodesic_sentences:
            print(f"  {sentence}")
        print(f"straight line (length {result.linear_length:.4f}):")
        for sentence in result.linear_sentences:
            print(f"  {sentence}")
        return EXIT_OK

    def run_check(self) -> int:
        a = self.args
        for path in a.metrics:
            if not os.path.isfile(path):
                raise ConfigError(f"metrics CSV not found: {path}")
        report = check_collapse(a.metrics, a.baseline, a.candidate)
        for v in report.verdicts:
            print(f"{v.source}: KL {v.kl_candidate:.2f} vs {v.kl_baseline:.2f}, "
                  f"rec {v.rec_candidate:.2f} vs {v.rec_baseline:.2f} -> {'ok' if v.keeps_kl else 'FAIL'}; "
                  f"MI {v.mi_candidate:.3f} vs {v.mi_baseline:.3f} (+/- {v.mi_margin:.3f}) "
                  f"-> {'ok' if v.keeps_mi else 'FAIL'}")
        print(f"KL kept in {report.kl_passes}/{len(report.verdicts)} seeds, "
              f"MI ordered in {report.mi_passes}/{len(report.verdicts)} seeds: "
              f"{'PASS' if report.passed else 'FAIL'}")
        return EXIT_OK if report.passed else EXIT_CHECK_FAILED

    def run(self) -> int:
        handlers = {
            'train': self.run_train, 'eval': self.run_eval, 'sample': self.run_sample,
            'clusters': self.run_clusters, 'geodesic': self.run_geodesic, 'plots': self.run_plots,
            'interpolate': self.run_interpolate, 'check': self.run_check,
        }
        return handlers[self.args.command]()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='WAE-RNF experiment orchestrator')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='key=value run config file')
    common.add_argument('--seed', type=int, help='Random seed')
    common.add_argument('--data-dir', help='Directory with train.txt / dev.txt / test.txt')
    common.add_argument('--checkpoint', help='Checkpoint (.npz) to resume from or evaluate')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--verbose', action='store_true', help='Debug logging')
    common.add_argument('--quiet', action='store_true', help='No progress bars')

    sub = parser.add_subparsers(dest='command', required=True)

    train = sub.add_parser('train', parents=[common], help='Train a model')
    train.add_argument('--objective', choices=['vae', 'vae-nf', 'wae', 'wae-nf', 'wae-rnf'])
    train.add_argument('--epochs', type=int)

    ev = sub.add_parser('eval', parents=[common], help='Evaluate a checkpoint')
    ev.add_argument('--split', default='test', choices=['train', 'dev', 'test'])

    smp = sub.add_parser('sample', parents=[common], help='Sample sentences from the prior')
    smp.add_argument('--n', type=int, default=100)
    smp.add_argument('--mode', default='greedy', choices=['greedy', 'temperature'])
    smp.add_argument('--temperature', type=float, default=1.0)
    smp.add_argument('--max-len', type=int, default=50)
    smp.add_argument('--output', help='Samples file (default: <out>/samples.txt)')

    cl = sub.add_parser('clusters', parents=[common], help='Gather latent clusters')
    cl.add_argument('--k', type=int)
    cl.add_argument('--output', help='Cluster artifact path')

    geo = sub.add_parser('geodesic', parents=[common], help='Solve a geodesic in the flow metric')
    geo.add_argument('--za')
    geo.add_argument('--zb')
    geo.add_argument('--sentence-a')
    geo.add_argument('--sentence-b')
    geo.add_argument('--segments', type=int, default=32)
    geo.add_argument('--iters', type=int, default=500)

    pl = sub.add_parser('plots', parents=[common], help='MI chart and curvature heatmap')
    pl.add_argument('--metrics', help='metrics.csv to chart')
    pl.add_argument('--split', default='dev')

    ip = sub.add_parser('interpolate', parents=[common], help='Decode along geodesic and straight line')
    ip.add_argument('--sentence-a', required=True)
    ip.add_argument('--sentence-b', required=True)
    ip.add_argument('--steps', type=int, default=8)
    ip.add_argument('--segments', type=int, default=32)
    ip.add_argument('--iters', type=int, default=300)

    ck = sub.add_parser('check', parents=[common], help='Collapse experiment verdict over per-seed metrics')
    ck.add_argument('--metrics', nargs='+', required=True, help='One metrics.csv per seed, both models inside')
    ck.add_argument('--baseline', default='vae', help='Model label of the plain VAE')
    ck.add_argument('--candidate', default='wae-rnf', help='Model label of the WAE-RNF run')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point."""
    args = build_parser().parse_args(argv)
    log_dir = os.path.join(ensure_output_dir(args.out or 'runs', 'logs'), 'logs')
    setup_logging(logging.DEBUG if args.verbose else logging.INFO,
                  log_file=os.path.join(log_dir, 'orchestrator.log'))
    try:
        return ExperimentOrchestrator(args).run()
    except (ConfigError, ValidationError) as e:
        logger.error(f"❌ Configuration error: {e}")
        return EXIT_CONFIG
    except (NumericalAbort, NonFiniteError) as e:
        logger.error(f"❌ Numerical abort: {e}")
        return EXIT_NUMERICAL
    except RnfError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return 1


if __name__ == '__main__':
    sys.exit(main())
