"""One seed per run, split into independent streams per component."""

import numpy as np

COMPONENTS = ("data", "init", "train", "eval", "check")


def component_rng(seed: int, component: str) -> np.random.Generator:
    children = np.random.SeedSequence(seed).spawn(len(COMPONENTS))
    return np.random.default_rng(children[COMPONENTS.index(component)])
