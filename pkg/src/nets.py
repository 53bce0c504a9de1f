#!/usr/bin/env python3
"""
WAE-RNF - Sequence Networks
Single-layer LSTM encoder and decoder sharing one word embedding, posterior
heads (tanh MLP + batch normalization) for μ and log σ, and the ``TextVAE``
container holding them together with the flow stack.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import softmax

from data import BOS_ID, EOS_ID
from divergences import DiagGaussian
from flows import FlowStack
from grad_core import (Tensor, as_tensor, concat, dropout_apply, embedding_lookup, gather,
                       log_softmax, no_grad, parameter, sigmoid, tanh)
from rnf import ClusterSet
from rnf_utils import ContractError, DimensionError, VocabularyError

logger = logging.getLogger('nets')

MAX_DECODE_LEN = 200
INJECTION_MODES = ('init-state', 'init-state+concat')
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return parameter(rng.uniform(-bound, bound, shape))


@dataclass
class Linear:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> 'Linear':
        bound = 1.0 / np.sqrt(n_in)
        return cls(_uniform(rng, (n_in, n_out), bound), parameter(np.zeros(n_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def parameters(self) -> Dict[str, Tensor]:
        return {'weight': self.weight, 'bias': self.bias}


@dataclass
class LstmParams:
    """Gate weights in (input, forget, cell, output) column blocks of width H."""
    w_ih: Tensor
    w_hh: Tensor
    bias: Tensor

    def __post_init__(self):
        H = self.hidden
        if self.w_hh.shape != (H, 4 * H) or self.bias.shape != (4 * H,) or self.w_ih.shape[1] != 4 * H:
            raise DimensionError(f"LSTM: inconsistent gate shapes {self.w_ih.shape}, "
                                 f"{self.w_hh.shape}, {self.bias.shape}")

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_ih.shape[0]

    @classmethod
    def init(cls, input_size: int, hidden: int, rng: np.random.Generator,
             scale: float = 0.1) -> 'LstmParams':
        return cls(_uniform(rng, (input_size, 4 * hidden), scale),
                   _uniform(rng, (hidden, 4 * hidden), scale),
                   parameter(np.zeros(4 * hidden)))

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        H = self.hidden
        gates = x @ self.w_ih + h @ self.w_hh + self.bias
        i = sigmoid(gates[:, 0:H])
        f = sigmoid(gates[:, H:2 * H])
        g = tanh(gates[:, 2 * H:3 * H])
        o = sigmoid(gates[:, 3 * H:4 * H])
        c_new = f * c + i * g
        return o * tanh(c_new), c_new

    def parameters(self) -> Dict[str, Tensor]:
        return {'w_ih': self.w_ih, 'w_hh': self.w_hh, 'bias': self.bias}


@dataclass
class BatchNorm:
    """Per-feature normalization; batch statistics in training, running averages in eval."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray

    @classmethod
    def init(cls, width: int) -> 'BatchNorm':
        return cls(parameter(np.ones(width)), parameter(np.zeros(width)),
                   np.zeros(width), np.ones(width))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if training:
            mean = x.mean(axis=0)
            centered = x - mean
            var = centered.square().mean(axis=0)
            x_hat = centered / (var + BN_EPS).sqrt()
            self.running_mean = (1.0 - BN_MOMENTUM) * self.running_mean + BN_MOMENTUM * mean.data
            self.running_var = (1.0 - BN_MOMENTUM) * self.running_var + BN_MOMENTUM * var.data
        else:
            x_hat = (x - self.running_mean) / np.sqrt(self.running_var + BN_EPS)
        return x_hat * self.gamma + self.beta

    def parameters(self) -> Dict[str, Tensor]:
        return {'gamma': self.gamma, 'beta': self.beta}

    def buffers(self) -> Dict[str, np.ndarray]:
        return {'running_mean': self.running_mean, 'running_var': self.running_var}


@dataclass
class MlpHead:
    """Linear → tanh → Linear → BatchNorm."""
    hidden: Linear
    out: Linear
    norm: BatchNorm

    @classmethod
    def init(cls, n_in: int, width: int, n_out: int, rng: np.random.Generator) -> 'MlpHead':
        return cls(Linear.init(n_in, width, rng), Linear.init(width, n_out, rng), BatchNorm.init(n_out))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return self.norm(self.out(tanh(self.hidden(x))), training)

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"hidden.{k}": v for k, v in self.hidden.parameters().items()}
        params.update({f"out.{k}": v for k, v in self.out.parameters().items()})
        params.update({f"norm.{k}": v for k, v in self.norm.parameters().items()})
        return params


@dataclass
class PosteriorHead:
    mlp_mu: MlpHead
    mlp_sigma: MlpHead

    @classmethod
    def init(cls, n_in: int, width: int, latent_dim: int, rng: np.random.Generator) -> 'PosteriorHead':
        return cls(MlpHead.init(n_in, width, latent_dim, rng), MlpHead.init(n_in, width, latent_dim, rng))

    def __call__(self, h: Tensor, training: bool) -> DiagGaussian:
        return DiagGaussian(self.mlp_mu(h, training), self.mlp_sigma(h, training))

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"mu.{k}": v for k, v in self.mlp_mu.parameters().items()}
        params.update({f"sigma.{k}": v for k, v in self.mlp_sigma.parameters().items()})
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {
            'mu.norm.running_mean': self.mlp_mu.norm.running_mean,
            'mu.norm.running_var': self.mlp_mu.norm.running_var,
            'sigma.norm.running_mean': self.mlp_sigma.norm.running_mean,
            'sigma.norm.running_var': self.mlp_sigma.norm.running_var,
        }

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        self.mlp_mu.norm.running_mean = np.array(buffers['mu.norm.running_mean'])
        self.mlp_mu.norm.running_var = np.array(buffers['mu.norm.running_var'])
        self.mlp_sigma.norm.running_mean = np.array(buffers['sigma.norm.running_mean'])
        self.mlp_sigma.norm.running_var = np.array(buffers['sigma.norm.running_var'])


@dataclass(frozen=True)
class DecoderConfig:
    injection: str = 'init-state+concat'
    dropout: float = 0.2
    embed_dim: int = 200

    def __post_init__(self):
        if self.injection not in INJECTION_MODES:
            raise ContractError(f"decoder injection must be one of {INJECTION_MODES}, got '{self.injection}'")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError(f"dropout rate must lie in [0, 1), got {self.dropout}")

    @property
    def concat_latent(self) -> bool:
        return self.injection == 'init-state+concat'


@dataclass
class DecoderOutput:
    """Per-position log p(x_t | x_<t, z') (0 at masked positions) and per-sentence totals."""
    token_loglik: Tensor
    sentence_loglik: Tensor

    @property
    def nll(self) -> Tensor:
        return -self.sentence_loglik


@dataclass
class TextVAE:
    """Encoder, decoder, posterior heads and flow stack of one sentence VAE."""
    embedding: Tensor
    encoder: LstmParams
    head: PosteriorHead
    latent_to_state: Linear
    decoder: LstmParams
    output: Linear
    decoder_cfg: DecoderConfig
    flows: FlowStack = field(default_factory=FlowStack)
    clusters: Optional[ClusterSet] = None
    training: bool = True

    @classmethod
    def build(cls, vocab_size: int, rng: np.random.Generator, embed_dim: int = 200,
              hidden: int = 200, latent_dim: int = 32, mlp_hidden: int = 200,
              num_flows: int = 0, decoder_cfg: Optional[DecoderConfig] = None) -> 'TextVAE':
        decoder_cfg = decoder_cfg or DecoderConfig(embed_dim=embed_dim)
        dec_in = embed_dim + (latent_dim if decoder_cfg.concat_latent else 0)
        model = cls(
            embedding=_uniform(rng, (vocab_size, embed_dim), 0.1),
            encoder=LstmParams.init(embed_dim, hidden, rng),
            head=PosteriorHead.init(hidden, mlp_hidden, latent_dim, rng),
            latent_to_state=Linear.init(latent_dim, 2 * hidden, rng),
            decoder=LstmParams.init(dec_in, hidden, rng),
            output=Linear.init(hidden, vocab_size, rng),
            decoder_cfg=decoder_cfg,
            flows=FlowStack.init(latent_dim, num_flows, rng),
        )
        logger.info(f"Built TextVAE: V={vocab_size}, E={embed_dim}, H={hidden}, d={latent_dim}, "
                     f"T={num_flows}, {model.num_parameters()} parameters")
        return model

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.latent_to_state.weight.shape[0]

    @property
    def hidden(self) -> int:
        return self.encoder.hidden

    def train(self) -> 'TextVAE':
        self.training = True
        return self

    def eval(self) -> 'TextVAE':
        self.training = False
        return self

    def parameters(self) -> Dict[str, Tensor]:
        params = {'embedding': self.embedding}
        for prefix, part in (('encoder', self.encoder), ('head', self.head),
                             ('latent_to_state', self.latent_to_state),
                             ('decoder', self.decoder), ('output', self.output),
                             ('flows', self.flows)):
            params.update({f"{prefix}.{k}": v for k, v in part.parameters().items()})
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        return {f"head.{k}": v for k, v in self.head.buffers().items()}

    def load_buffers(self, buffers: Dict[str, np.ndarray]) -> None:
        self.head.load_buffers({k[len('head.'):]: v for k, v in buffers.items() if k.startswith('head.')})

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # -- helpers -----------------------------------------------------------

    def _check_ids(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim != 2:
            raise DimensionError(f"token batch must be B × L, got shape {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise VocabularyError(f"token ids outside [0, {self.vocab_size}): "
                                  f"min {ids.min()}, max {ids.max()}")
        return ids.astype(np.int64)

    def _embed(self, ids: np.ndarray, rng: Optional[np.random.Generator]) -> Tensor:
        emb = embedding_lookup(self.embedding, ids)
        rate = self.decoder_cfg.dropout
        if self.training and rate > 0.0 and rng is not None:
            keep = (rng.random(emb.shape) >= rate) / (1.0 - rate)
            emb = dropout_apply(emb, Tensor(keep))
        return emb

    # -- operations --------------------------------------------------------

    def encode(self, ids, mask, rng: Optional[np.random.Generator] = None) -> DiagGaussian:
        """Final LSTM state at each sentence's last real position → (μ, log σ)."""
        ids = self._check_ids(ids)
        mask = np.asarray(mask, dtype=np.float64)
        B, L = ids.shape
        emb = self._embed(ids, rng)
        h = Tensor(np.zeros((B, self.hidden)))
        c = Tensor(np.zeros((B, self.hidden)))
        for t in range(L):
            h_new, c_new = self.encoder.step(emb[:, t, :], h, c)
            m = mask[:, t:t + 1]
            h = h_new * m + h * (1.0 - m)
            c = c_new * m + c * (1.0 - m)
        return self.head(h, self.training)

    def reparameterize(self, q: DiagGaussian, noise) -> Tensor:
        return reparameterize(q, noise)

    def _initial_state(self, z: Tensor) -> Tuple[Tensor, Tensor]:
        state = self.latent_to_state(z)
        H = self.hidden
        return state[:, 0:H], state[:, H:2 * H]

    def decode_teacher_forced(self, z, ids, mask,
                              rng: Optional[np.random.Generator] = None) -> DecoderOutput:
        """
        Score ``ids`` (targets, EOS included) given latent codes ``z``.

        The decoder reads BOS followed by the targets shifted right.
        """
        z = as_tensor(z)
        ids = self._check_ids(ids)
        mask = np.asarray(mask, dtype=np.float64)
        B, L = ids.shape
        if z.shape != (B, self.latent_dim):
            raise DimensionError(f"decoder: latent batch {z.shape} does not match ({B}, {self.latent_dim})")
        inputs = np.concatenate([np.full((B, 1), BOS_ID, dtype=np.int64), ids[:, :-1]], axis=1)
        emb = self._embed(inputs, rng)
        h, c = self._initial_state(z)
        columns: List[Tensor] = []
        total = None
        for t in range(L):
            x = emb[:, t, :]
            if self.decoder_cfg.concat_latent:
                x = concat([x, z], axis=1)
            h, c = self.decoder.step(x, h, c)
            logp = log_softmax(self.output(h), axis=-1)
            tok = gather(logp, ids[:, t]) * mask[:, t]
            columns.append(tok.reshape(B, 1))
            total = tok if total is None else total + tok
        if total is None:
            return DecoderOutput(Tensor(np.zeros((B, 0))), Tensor(np.zeros(B)))
        return DecoderOutput(concat(columns, axis=1), total)

    def decode_sample(self, z, max_len: int = MAX_DECODE_LEN, mode: str = 'greedy',
                      temperature: float = 1.0,
                      rng: Optional[np.random.Generator] = None) -> List[List[int]]:
        """
        Autoregressive decoding from BOS until EOS or ``max_len`` tokens.

        ``mode`` is 'greedy' or 'temperature'; a temperature at or below 1e-8
        falls back to greedy. Returned sequences exclude BOS and EOS.
        """
        if max_len > MAX_DECODE_LEN or max_len < 1:
            raise ContractError(f"decode: max_len must lie in [1, {MAX_DECODE_LEN}], got {max_len}")
        if mode not in ('greedy', 'temperature'):
            raise ContractError(f"decode: mode must be 'greedy' or 'temperature', got '{mode}'")
        greedy = mode == 'greedy' or temperature <= 1e-8
        if not greedy and rng is None:
            raise ContractError("decode: temperature sampling needs an rng")

        was_training = self.training
        self.eval()
        try:
            with no_grad():
                z = np.atleast_2d(np.asarray(as_tensor(z).data))
                B = z.shape[0]
                zt = Tensor(z)
                h, c = self._initial_state(zt)
                prev = np.full(B, BOS_ID, dtype=np.int64)
                out: List[List[int]] = [[] for _ in range(B)]
                done = np.zeros(B, dtype=bool)
                for _ in range(max_len):
                    x = embedding_lookup(self.embedding, prev)
                    if self.decoder_cfg.concat_latent:
                        x = concat([x, zt], axis=1)
                    h, c = self.decoder.step(x, h, c)
                    logits = self.output(h).data
                    if greedy:
                        nxt = np.argmax(logits, axis=1)
                    else:
                        probs = softmax(logits / temperature, axis=1)
                        nxt = np.array([rng.choice(self.vocab_size, p=p) for p in probs])
                    for b in np.flatnonzero(~done):
                        if nxt[b] == EOS_ID:
                            done[b] = True
                        else:
                            out[b].append(int(nxt[b]))
                    if done.all():
                        break
                    prev = nxt.astype(np.int64)
        finally:
            self.training = was_training
        return out


def reparameterize(q: DiagGaussian, noise) -> Tensor:
    """z = μ + σ ⊙ ε, differentiable in μ and log σ."""
    noise = as_tensor(noise)
    if noise.shape != q.mu.shape:
        raise DimensionError(f"reparameterize: noise {noise.shape} does not match posterior {q.mu.shape}")
    return q.mu + q.sigma * noise
