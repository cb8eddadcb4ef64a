"""Smoke test for the discourse_particles extension.

Run from the repository root after `pip install --no-build-isolation -e crates/py`.
"""

import math
import random
from pathlib import Path

import discourse_particles as dp

ROOT = Path(__file__).resolve().parent.parent


def blobs(rng, centers, per, spread):
    return [[cx + rng.gauss(0, spread), cy + rng.gauss(0, spread)] for cx, cy in centers for _ in range(per)]


def main():
    corpus = dp.Corpus.load(str(ROOT / "data/synthetic/dialogues.jsonl"))
    windows = corpus.particle_windows(["lah", "meh", "hor"])
    assert len(corpus) > 0 and corpus.dialogue_count > 0
    assert windows and {p for _, _, p in windows} <= {"lah", "meh", "hor"}
    d, turn, particle = windows[0]
    assert particle in corpus.tokens(d, turn)
    assert dp.tokenize("ok lah!") == ["ok", "lah", "!"]

    assert dp.adjusted_rand_index([0, 0, 1, 1], [5, 5, 7, 7]) == 1.0
    assert dp.adjusted_rand_index([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0
    labels = [i % 2 for i in range(40)]
    t = dp.permutation_test(labels, ["a" if x else "b" for x in labels], permutations=999, seed=1)
    assert t["p_value"] == 1 / 1000

    assert dp.recall_at_k([([0.9, 0.1], 0), ([0.2, 0.8], 0)], 1) == 0.5
    b = dp.bleu(["the the the"], ["the cat"], max_n=1)
    assert abs(b["precisions"][0] - 1 / 3) < 1e-12

    rng = random.Random(0)
    pts = blobs(rng, [(0, 0), (15, 0), (0, 15)], 30, 0.7)
    assert len(set(dp.dbscan(pts, 2.0, 4)) - {None}) == 3
    sweep = dp.sweep_dbscan(pts, min_clusters=3)
    assert sweep["silhouette"] > 0.5
    assert abs(dp.silhouette(pts, sweep["labels"]) - sweep["silhouette"]) < 1e-12
    y = dp.tsne(pts, perplexity=10, iterations=300, seed=2)
    assert len(y) == len(pts) and all(len(r) == 2 and all(map(math.isfinite, r)) for r in y)
    assert y == dp.tsne(pts, perplexity=10, iterations=300, seed=2)

    pairs = [("a b", "x y"), ("a c", "x z"), ("b c", "y z")]
    aligner = dp.Aligner(pairs, em_iterations=10)
    assert aligner.best("a") == "x"
    ll = aligner.log_likelihood
    assert all(b >= a - 1e-9 for a, b in zip(ll, ll[1:]))
    assert aligner.translate("c a") == "z x"

    mt = ROOT / "data/mt/dictionary"
    seed = [tuple(line.split("\t")[:2]) for line in (mt / "seed_pairs.tsv").read_text().splitlines() if line]
    mono = [line for line in (mt / "monolingual.txt").read_text().splitlines() if line]
    out = dp.backtranslate(seed, mono, iterations=2)
    assert out["bleu"][2] >= out["bleu"][0]
    assert out["pairs"][1] > out["pairs"][0]

    for bad in (lambda: dp.dbscan([[0.0], [1.0, 2.0]], 1.0, 2), lambda: dp.adjusted_rand_index([0], [0, 1])):
        try:
            bad()
        except ValueError:
            pass
        else:
            raise AssertionError("expected ValueError")
    try:
        dp.Corpus.load("/nonexistent/corpus.jsonl")
    except OSError:
        pass
    else:
        raise AssertionError("expected OSError")

    print(f"discourse_particles {dp.__version__}: smoke test passed")


if __name__ == "__main__":
    main()
