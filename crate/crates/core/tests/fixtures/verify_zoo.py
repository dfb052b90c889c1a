#!/usr/bin/env python3
"""Independent check of the zoo fixture under the hashed bag-of-tokens embedder.

For every query set (D1, D2, D3, paraphrase queries) and every index
configuration admitted by the leave-one-out rule, asserts that each query's
truth entry ranks first. For the paraphrase queries it additionally asserts
that the query shares strictly more distinct tokens with its target's
embedding input than with any other entry's.

Usage: python3 verify_zoo.py   (exit status 0 when the fixture holds)
"""
import itertools, json, math, os, re, sys

HERE = os.path.dirname(os.path.abspath(__file__))
DIM = 768
LEVELS = ["D1", "D2", "D3"]
LEVEL_NAME = {"D1": "Novice", "D2": "Intermediate", "D3": "Expert"}


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def tokens(text):
    assert text.isascii()
    return [t for t in re.split(r"[^a-z0-9]", text.lower()) if t]


def embed(text):
    v = [0] * DIM
    for t in tokens(text):
        v[fnv1a64(t.encode()) % DIM] += 1
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def cos(a, b):
    return sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def load():
    root = os.path.join(HERE, "zoo")
    descs = json.load(open(os.path.join(HERE, "zoo_descriptions.json")))
    entries = {}
    for pid in sorted(os.listdir(root)):
        files = sorted(f for f in os.listdir(os.path.join(root, pid)) if f.endswith(".mzn"))
        src = "\n".join(
            "% file: " + f + "\n" + open(os.path.join(root, pid, f)).read().rstrip("\r\n") for f in files
        )
        entries[pid] = (src, descs[pid])
    return entries


def doc(entry, levels):
    src, d = entry
    return "\n\n".join([src] + ["--- DESCRIPTION (%s) ---\n%s" % (LEVEL_NAME[l], d[l]) for l in levels])


def main():
    entries = load()
    ext = json.load(open(os.path.join(HERE, "zoo_queries.json")))["queries"]
    configs = [c for r in range(4) for c in itertools.combinations(LEVELS, r)]
    rows = {l: [(entries[p][1][l], p) for p in entries] for l in LEVELS}
    rows["External"] = [(q["text"], q["truth_id"]) for q in ext if q["truth_id"]]
    bad = 0
    worst = 1.0
    for cfg in configs:
        docs = {p: doc(e, cfg) for p, e in entries.items()}
        vecs = {p: embed(t) for p, t in docs.items()}
        for row, queries in rows.items():
            if row in cfg:
                continue
            for text, truth in queries:
                q = embed(text)
                scored = sorted(((-cos(q, v), p) for p, v in vecs.items()))
                if scored[0][1] != truth:
                    bad += 1
                    print("FAIL", row, "SC+" + "&".join(cfg), truth, "->", scored[0][1], -scored[0][0], file=sys.stderr)
                else:
                    worst = min(worst, -scored[0][0] + scored[1][0])
                if row == "External":
                    qt = set(tokens(text))
                    overlap = {p: len(qt & set(tokens(t))) for p, t in docs.items()}
                    rival = max(v for p, v in overlap.items() if p != truth)
                    if overlap[truth] <= rival:
                        bad += 1
                        print("OVERLAP", "SC+" + "&".join(cfg), truth, overlap[truth], rival, file=sys.stderr)
    print("failures:", bad, "smallest cosine margin:", round(worst, 4))
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
