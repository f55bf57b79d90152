"""Independent reference implementations used by several test modules."""

from collections import defaultdict

import numpy as np

from bam.align import align_transcript
from bam.core import CIState
from bam.gmm import estimate_gmm, varmix_size
from bam.mphone import MPhoneKey, backoff_chain, decode_key, encode_key, extract_maximal

PHONES = ["a", "b", "ch", "d", "eh", "sil", "|"]


def random_keys(rng, n, M=2):
    """n distinct sorted encoded keys with random shapes up to order M."""
    keys = set()
    while len(keys) < n:
        c = CIState(str(rng.choice(PHONES[:-1])), int(rng.integers(1, 4)))
        left = tuple(str(p) for p in rng.choice(PHONES, size=int(rng.integers(0, M + 1))))
        right = tuple(str(p) for p in rng.choice(PHONES, size=int(rng.integers(0, M + 1))))
        keys.add(encode_key(MPhoneKey(c, left, right), M))
    return sorted(keys)


def oracle_model(corpus, baseline, lexicon, cfg, word_boundary):
    """Single-process group-by of every key's frames, then the same estimator.

    A back-off key pools the frames of every maximal key whose chain
    contains it (and its own, when it also occurs as a maximal key).
    """
    maximal = defaultdict(list)
    for utt in corpus:
        symbols, ali = align_transcript(utt, utt.transcript, lexicon, baseline, word_boundary)
        for key, (a, b) in extract_maximal(ali, symbols, cfg.M):
            maximal[encode_key(key, cfg.M)].append(utt.frames[a:b])
    pooled = defaultdict(list)
    for k in sorted(maximal):
        frames = np.concatenate(maximal[k])
        for b in backoff_chain(decode_key(k, cfg.M)):
            pooled[encode_key(b, cfg.M)].append(frames)
    out = {}
    for k in sorted(set(maximal) | set(pooled)):
        data = pooled.get(k, []) + ([np.concatenate(maximal[k])] if k in maximal else [])
        x = np.concatenate(data)
        if x.shape[0] >= cfg.n_min:
            out[k] = estimate_gmm(x, varmix_size(x.shape[0], cfg.varmix), cfg.em_iterations, cfg.variance_floor)
    return out
