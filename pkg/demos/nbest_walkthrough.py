"""Walk through the noisy channel on one utterance.

Trains a channel and a bigram on a small synthetic corpus, then lists the
best analyses of "a flight to boston uh i mean to denver".  The reference
analysis ("to boston" edited, "uh i mean" an interregnum) is broken down
into its repair region and alignment ops; the toy corpus never pairs
"boston" with "denver", so the channel alone need not rank it first, which
is the gap the reranker's LM features are meant to close.
"""
import argparse

from disfluency.channel import nbest, score_channel, train_channel
from disfluency.corpus import Utterance
from disfluency.ngram import train_ngram
from disfluency.synthetic import synthetic_corpus

EXTRA = [
    "a flight to denver", "a flight to boston", "i want a flight to denver",
    "the flight to boston is late", "i need a ticket to denver",
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=10, help="list size")
    ap.add_argument("--utterance", default="a flight to boston uh i mean to denver")
    ap.add_argument("--reference", default="OOEEFFFOO", help="label string to break down")
    args = ap.parse_args()

    corpus, _ = synthetic_corpus(2000, rate=0.3, seed=1)
    corpus += [Utterance.from_words(f"x{i}", s.split(), "O" * len(s.split())) for i, s in enumerate(EXTRA * 5)]
    ch = train_channel(corpus)
    lm = train_ngram([u.fluent_words() for u in corpus], 2)

    u = Utterance.from_words("demo", args.utterance.split())
    cl = nbest(u, ch, lm, args.n)
    print(f"{'labels':<14}{'total':>9}{'channel':>9}{'bigram':>9}  fluent string")
    for c in cl:
        print(f"{c.label_string:<14}{c.ncm_total_logprob:9.2f}{c.channel_logprob:9.2f}"
              f"{c.ncm_lm_logprob:9.2f}  {' '.join(c.fluent)}")

    ranks = {c.label_string: k for k, c in enumerate(cl.candidates, 1)}
    ref = cl.candidates[ranks.get(args.reference, 1) - 1]
    print(f"\nreference {args.reference} is at rank {ranks.get(args.reference, 'beyond n')}")
    print("analysis:", " ".join(f"{w}/{l.value}" for w, l in zip(ref.words, ref.labels)))
    for r in ref.repairs:
        ops = " ".join(op.kind.value for op in r.alignment)
        print(f"  reparandum {r.reparandum_span}  interregnum {r.interregnum_span}  "
              f"repair {r.repair_span}  ops: {ops}")
    print(f"  rescored channel log-prob {score_channel(ref, ch):.4f}")

if __name__ == "__main__":
    main()
