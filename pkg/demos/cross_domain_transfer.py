"""How information crosses domains.

Intra-domain masking on its own seals the domains off from each other: edit
every Books item in a history and the Movies predictions do not move at all.
The dynamic domain states are the bridge.  Each position keeps the latest
hidden state of every domain and uses those as extra queries, so the same
edit now shifts the Movies predictions.
"""

import numpy as np

from cdsr.checks import randomize, toy_catalog
from cdsr.ddsr import build_domain_states
from cdsr.model import ModelConfig, SequenceModel
from cdsr.numerics import Tensor, no_grad

BOOKS, MOVIES = 0, 1
cat = toy_catalog(2, 5)
domains = [BOOKS, MOVIES, BOOKS, BOOKS, MOVIES, MOVIES]
items = [0, 5, 1, 2, 7, 6]
edited = [4, 5, 3, 0, 7, 6]  # books swapped, movies untouched


def movie_scores(model, seq):
    with no_grad():
        H = model.forward(seq, domains, MOVIES).data
    return np.stack([model.domain_scores(H[i], MOVIES) for i, d in enumerate(domains) if d == MOVIES])


for use_ddsr in (False, True):
    model = SequenceModel(ModelConfig(k=8, h=2, L=2, n_max=8, use_tape=False, use_ddsr=use_ddsr), cat)
    randomize(model.parameters(), np.random.default_rng(0))
    diff = np.abs(movie_scores(model, items) - movie_scores(model, edited)).max()
    print(f"use_ddsr={use_ddsr!s:5}: largest change in Movies scores after editing Books = {diff:.3g}")

# the cached states: row d, column i holds the newest hidden state of domain d up to i
H = Tensor(np.arange(len(domains), dtype=float)[:, None] * np.ones((1, 3)))
states = build_domain_states(H, domains, 2)
print("\nposition whose state each domain holds (-1 = not seen yet):")
for d, name in enumerate(["Books", "Movies"]):
    src = [int(states.states.data[d, i, 0]) if states.present[d, i] else -1 for i in range(len(domains))]
    print(f"  {name:>6}: {src}")
