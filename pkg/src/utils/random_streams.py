"""
Flux aleatoires nommes.
Une graine maitre se decline en sous-flux independants (mixing, init, ...).
"""

import zlib

import numpy as np

MIXING = "mixing"
INIT = "init"
TRAIN_PAIRS = "train-pairs"
EVAL_SET = "eval-set"


def named_stream(seed: int, name: str) -> np.random.Generator:
    """
    Retourne le generateur du sous-flux `name` pour la graine `seed`.

    Le meme couple (seed, name) donne toujours la meme suite, et deux noms
    differents donnent des suites independantes.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))
