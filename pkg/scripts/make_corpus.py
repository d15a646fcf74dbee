#!/usr/bin/env python3
"""Generate a reproducible synthetic text corpus for the lab.

A seeded Zipfian lexicon arranged into sentences and paragraphs gives a
byte stream with enough structure to train on and enough entropy that a
small model plateaus well above zero loss.
"""

import argparse

import numpy as np

CONSONANTS = list("bcdfghjklmnpqrstvwz")
VOWELS = list("aeiou")


def build_lexicon(rng: np.random.Generator, size: int) -> list:
    words = set()
    while len(words) < size:
        n_syll = rng.integers(1, 4)
        w = "".join(
            rng.choice(CONSONANTS) + rng.choice(VOWELS) + (rng.choice(CONSONANTS) if rng.random() < 0.3 else "")
            for _ in range(n_syll)
        )
        words.add(w)
    return sorted(words)


def generate(size_bytes: int, seed: int, lexicon_size: int = 512) -> bytes:
    rng = np.random.Generator(np.random.PCG64(seed))
    lex = build_lexicon(rng, lexicon_size)
    ranks = np.arange(1, len(lex) + 1, dtype=np.float64)
    zipf = 1.0 / ranks
    zipf /= zipf.sum()
    order = rng.permutation(len(lex))
    out = []
    total = 0
    while total < size_bytes:
        sent_len = int(rng.integers(4, 14))
        idx = rng.choice(len(lex), size=sent_len, p=zipf)
        words = [lex[order[i]] for i in idx]
        if rng.random() < 0.15:
            words[rng.integers(0, sent_len)] = str(rng.integers(0, 1000))
        sent = " ".join(words).capitalize() + (". " if rng.random() < 0.8 else "? ")
        if rng.random() < 0.08:
            sent += "\n"
        out.append(sent)
        total += len(sent)
    return "".join(out).encode()[:size_bytes]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--size-mb", type=float, default=8.0)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    data = generate(int(args.size_mb * (1 << 20)), args.seed)
    with open(args.out, "wb") as f:
        f.write(data)
    print(f"{args.out}: {len(data)} bytes")


if __name__ == "__main__":
    main()
