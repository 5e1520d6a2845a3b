"""Smoke test for the sidkit Python module.

Build and install first:
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/sidkit-*.whl
"""

import math
import random

import sidkit


def main():
    s = sidkit.SidStructure([8192, 8192, 8192], 64)
    assert s.render([1220, 130, 4068]) == "C1220C8322C20452"
    assert s.parse("C3626C8758C22717") == [3626, 566, 6333]
    assert s.decode(s.encode([5, 6, 7])) == [5, 6, 7]

    assert sidkit.gini([0, 0, 0, 8]) == 0.75
    assert sidkit.gini([1, 1, 1, 1]) == 0.0
    assert abs(sidkit.gini([8], total_slots=4) - 0.75) < 1e-12

    rng = random.Random(0)
    centers = [[rng.gauss(0, 5) for _ in range(6)] for _ in range(8)]
    rows = []
    for i in range(400):
        c = centers[i % 8]
        rows.append((f"item{i:03d}", [x + rng.gauss(0, 0.5) for x in c]))
    small = sidkit.SidStructure([4, 4], 6)
    q = sidkit.Quantizer.rqkmeans([v for _, v in rows], small, seed=1)
    assert q.kind == "rqkmeans"
    codes = q.assign("item000", rows[0][1])
    assert len(codes) == 2 and all(0 <= c < 4 for c in codes)

    noco = q.assign_catalog(rows, policy="noco")
    knn = q.assign_catalog(rows, policy="knn", sigma=30)
    rnd = q.assign_catalog(rows, policy="random")

    def occupancy(table):
        counts = {}
        for _, sid in table:
            counts[tuple(sid)] = counts.get(tuple(sid), 0) + 1
        return list(counts.values())

    g = {name: sidkit.gini(occupancy(t), total_slots=16) for name, t in
         [("noco", noco), ("knn", knn), ("random", rnd)]}
    assert g["random"] <= g["knn"] + 0.02, g
    assert g["knn"] <= g["noco"] + 0.02, g

    seqs = [[codes for _, codes in noco[i:i + 5]] for i in range(0, 395, 5)]
    scorer = sidkit.MarkovScorer.train(seqs, small, order=2, alpha=0.1)
    lp = scorer.next_log_probs(seqs[0][:2])
    assert len(lp) == 4 and abs(sum(math.exp(x) for x in lp) - 1) < 1e-9
    top = scorer.beam_search(seqs[0][:2], [4, 16], 5)
    assert len(top) == 5 and all(a[1] >= b[1] for a, b in zip(top, top[1:]))

    loss = sidkit.info_nce([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.1], [0.1, 1.0]])
    assert loss > 0

    try:
        sidkit.SidStructure([1, 4])
    except ValueError:
        pass
    else:
        raise AssertionError("structure with a single-code level accepted")

    print("sidkit smoke test ok:", {k: round(v, 4) for k, v in g.items()})


if __name__ == "__main__":
    main()
