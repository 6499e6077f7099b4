"""Synthetic token sources for system-level experiments.

The HMM source runs a sticky hidden state; each (state, depth) pair owns a
permutation of the vocabulary, and the next token at a depth follows that
permutation of the previous token with probability emit_fidelity (uniform
noise otherwise). A copy-last strategy is therefore mostly wrong while a
context-conditioned predictor can learn the dominant transitions.
"""

from __future__ import annotations

import numpy as np


def hmm_token_source(
    n_frames: int,
    n_q: int,
    vocab: int,
    seed,
    n_states: int = 2,
    stay_prob: float = 0.97,
    emit_fidelity: float = 0.85,
    structure_seed=None,
) -> np.ndarray:
    """Seeded hidden-Markov token stream, shape (n_frames, n_q).

    structure_seed fixes the permutation tables (the source's "language") so
    that independently seeded realizations share the same statistics; it
    defaults to the realization seed.
    """
    if n_frames < 1 or n_q < 1 or vocab < 2 or n_states < 1:
        raise ValueError("invalid source dimensions")
    if not 0.0 <= stay_prob <= 1.0 or not 0.0 <= emit_fidelity <= 1.0:
        raise ValueError("probabilities must be in [0, 1]")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    struct_rng = np.random.default_rng(np.random.SeedSequence(
        seed if structure_seed is None else structure_seed))
    perms = np.stack([
        np.stack([struct_rng.permutation(vocab) for _ in range(n_q)])
        for _ in range(n_states)
    ])  # (n_states, n_q, vocab)
    tokens = np.empty((n_frames, n_q), dtype=np.int32)
    tokens[0] = rng.integers(0, vocab, size=n_q)
    state = int(rng.integers(0, n_states))
    for t in range(1, n_frames):
        if rng.random() >= stay_prob:
            state = int(rng.integers(0, n_states))
        follow = rng.random(n_q) < emit_fidelity
        stepped = perms[state, np.arange(n_q), tokens[t - 1]]
        noise = rng.integers(0, vocab, size=n_q)
        tokens[t] = np.where(follow, stepped, noise)
    return tokens


def markov_token_source(n_frames: int, n_q: int, transition: np.ndarray, seed) -> np.ndarray:
    """Per-depth first-order Markov token stream with a shared transition matrix."""
    transition = np.asarray(transition, dtype=np.float64)
    vocab = transition.shape[0]
    if transition.shape != (vocab, vocab):
        raise ValueError("transition must be square")
    if not np.allclose(transition.sum(axis=1), 1.0):
        raise ValueError("transition rows must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    tokens = np.empty((n_frames, n_q), dtype=np.int32)
    tokens[0] = rng.integers(0, vocab, size=n_q)
    for t in range(1, n_frames):
        for d in range(n_q):
            tokens[t, d] = rng.choice(vocab, p=transition[tokens[t - 1, d]])
    return tokens
