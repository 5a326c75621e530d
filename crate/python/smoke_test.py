"""Smoke test for the pyavtag extension module.

Build first with `cargo build -p avtag-py` (add `--release` and pass
`--lib target/release/libpyavtag.so` for a faster run), then:

    python3 python/smoke_test.py
"""

import argparse
import importlib.machinery
import importlib.util
import json
import math
import pathlib
import sys
import tempfile

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load(path):
    loader = importlib.machinery.ExtensionFileLoader("pyavtag", str(path))
    spec = importlib.util.spec_from_file_location("pyavtag", str(path), loader=loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def library_path(explicit):
    if explicit:
        return pathlib.Path(explicit)
    suffix = {"darwin": "dylib", "win32": "dll"}.get(sys.platform, "so")
    for profile in ("debug", "release"):
        candidate = ROOT / "target" / profile / f"libpyavtag.{suffix}"
        if candidate.exists():
            return candidate
    sys.exit("libpyavtag not found; run `cargo build -p avtag-py` first")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--lib", help="path to the built extension library")
    av = load(library_path(parser.parse_args().lib))

    tokens = av.tokenize("duck , fillet mignon and ranch raised lamb flavor")
    scheme = av.TagScheme("BIOE", ["flavor"])
    tags = scheme.encode(len(tokens), [("flavor", 0, 1), ("flavor", 2, 4), ("flavor", 5, 8)])
    assert " ".join(tags) == "B O B E O B I E O", tags
    assert scheme.decode(tokens, tags) == {"flavor": ["duck", "fillet mignon", "ranch raised lamb"]}

    # uniform CRF: every path equally likely
    k, n = 3, 2
    zeros = [[0.0] * (k + 2) for _ in range(k + 2)]
    log_z = av.crf_log_partition(zeros, [[0.0] * k for _ in range(n)])
    assert math.isclose(log_z, n * math.log(k), rel_tol=1e-12), log_z
    path, score = av.crf_viterbi(zeros, [[0.0, 2.0, 0.0], [1.0, 0.0, 0.0]])
    assert path == [1, 0] and score == 3.0, (path, score)

    assert av.tag_flips([[0, 1, 2], [0, 2, 2], [1, 2, 0]]) == 3.0

    records = [json.loads(line) for line in av.synth(n_train=40, n_test=0, owa=0.0, seed=1).splitlines()]
    assert len(records) == 40
    with tempfile.TemporaryDirectory() as tmp:
        corpus = pathlib.Path(tmp) / "corpus.jsonl"
        corpus.write_text("".join(json.dumps(r) + "\n" for r in records[:10]))
        config = {"embed_dim": 16, "hidden": 16, "attention_dim": 16, "dropout": 0.0, "batch_size": 10,
                  "epochs": 200, "learning_rate": 0.01, "bilstm_sigmoid_concat": False, "seed": 0}
        model, history = av.train(str(corpus), json.dumps(config))
        assert len(history) == 200 and history[-1][1] < history[0][1]
        scores = model.evaluate(str(corpus))
        assert scores["f1"] > 0.5, scores

        first = records[0]
        assert set(model.predict(first["text"])) <= set(model.scheme.attributes)
        weights = model.attention(first["text"])
        assert len(weights) == len(av.tokenize(first["text"]))
        assert 0.0 <= model.least_confidence(av.tokenize(first["text"])) <= 1.0

        path = pathlib.Path(tmp) / "model.avt"
        model.save(str(path))
        again = av.Model.load(str(path))
        assert again.tags(first["text"]) == model.tags(first["text"])
        assert again.variant == "opentag" and again.scheme.kind == "BIOE"

    print("pyavtag smoke test passed")


if __name__ == "__main__":
    main()
