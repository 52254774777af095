"""Smoke test for the concept_curation extension module."""

import math
import os
import tempfile

import concept_curation as cc


def main():
    assert cc.extract_concepts("A Dog on the grass, dog!", ["dog", "grass", "cat"]) == ["dog", "grass"]
    assert abs(cc.cosine([1.0, 0.0], [1.0, 0.0]) - 1.0) < 1e-9
    assert cc.prompt("dog") == "a photo of a dog"
    assert cc.score_total(0.5, 1.2) == 1.7

    index = cc.VectorIndex([[1.0, 0.0], [0.0, 1.0], [0.7, 0.7]], ["a", "b", "c"])
    hits = index.top_n([1.0, 0.0], 2, exclude="a")
    assert [h[0] for h in hits] == ["c", "b"], hits

    km = cc.kmeans([[0.0, 0.0], [0.0, 0.1], [5.0, 5.0], [5.1, 5.0]], 2, seed=0)
    assert km.assignment[0] == km.assignment[1] != km.assignment[2] == km.assignment[3]

    i2t, t2i = cc.info_nce([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.0, 1.0]], tau=1.0)
    expected = math.log(1.0 + math.exp(-1.0))
    assert abs(i2t - expected) < 1e-9 and abs(t2i - expected) < 1e-9

    img = [[1.0, 0.2, 0.0], [0.1, 1.0, 0.3], [0.0, 0.4, 1.0]]
    txt = [[0.9, 0.1, 0.1], [0.2, 0.8, 0.1], [0.1, 0.1, 0.9]]
    labels = [[[1.0, 0.0, 0.1]], [[0.0, 1.0, 0.0], [0.3, 0.3, 0.3]], [[0.0, 0.2, 1.0]]]
    report = cc.total_loss(img, txt, labels, tau=0.5)
    assert abs(report.total - (report.l_i2t + report.l_t2i + report.l_i2l + report.l_l2i)) < 1e-9
    err, _ = cc.grad_check(img, txt, labels, tau=0.5)
    assert err < 1e-4, err

    try:
        cc.info_nce([[1.0, 0.0]], [[1.0]], tau=1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("mismatched dims accepted")

    with tempfile.TemporaryDirectory() as tmp:
        cc.synth_corpus(tmp, vocab_size=20, dim=16, n_pairs=200, seed=3)
        out = os.path.join(tmp, "curated.jsonl")
        summary = cc.curate(cc.Config(input_dir=tmp, output=out, n_retrieve=8, labels=2))
        assert summary["records"] == 200, summary
        with open(out) as f:
            assert sum(1 for _ in f) == 200
        rows = cc.ablate(tmp, n_retrieve=8, labels=2)
        assert [r["mode"] for r in rows] == ["baseline", "language", "vision", "vision-ranked", "full"]
        assert rows[0]["missing_recall"] == 0.0

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
