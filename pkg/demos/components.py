"""Train every component on synthetic data and check it against its oracle.

1. channel: parameters recovered from a corpus generated by a known channel
2. Kneser-Ney: conditional distributions normalise
3. LSTM: BPTT gradients agree with finite differences; loss falls per epoch
4. reranker: expected f-score gradient agrees with finite differences
"""
import argparse
import random

import numpy as np

from disfluency.channel import train_channel
from disfluency.lstm import LstmConfig, build_vocab, check_gradients, init_model, perplexity, train_lstm
from disfluency.ngram import train_ngram
from disfluency.reranker import TrainingInstance, objective, standardization, train_reranker
from disfluency.synthetic import IDENTIFIABLE_OPS, synthetic_corpus


def channel_demo(n):
    corpus, truth = synthetic_corpus(n, rate=0.2, seed=3, p_op=IDENTIFIABLE_OPS, min_repair=6)
    learned = train_channel(corpus, alpha=1.0, em_iterations=5)
    print("channel op table, learned (truth)")
    for prev in truth.p_op:
        row = "  ".join(f"{k[:4]} {learned.p_op[prev][k]:.3f} ({truth.p_op[prev][k]:.3f})"
                        for k in truth.p_op[prev])
        print(f"  {prev:<11}{row}")
    print(f"  p_stop {learned.p_stop:.3f} ({truth.p_stop:.3f})")
    print("  (rows after DELETE are not identifiable: a DELETE next to an INSERT yields\n"
          "   the same strings in either order, so only the other rows should match)")
    return corpus


def ngram_demo(corpus):
    m = train_ngram([u.fluent_words() for u in corpus], 4)
    rng = random.Random(0)
    words = list(m.vocab)
    worst = max(abs(sum(m.distribution([rng.choice(words) for _ in range(3)]).values()) - 1)
                for _ in range(50))
    print(f"4-gram: {len(m.vocab)} types, discounts {np.round(m.discounts, 3).tolist()}, "
          f"max |sum - 1| over 50 contexts {worst:.1e}")


def lstm_demo(corpus, epochs):
    cfg = LstmConfig(layers=2, hidden=6, embed=4, init_scale=0.3, seed=0)
    tiny = init_model(build_vocab([["a", "b", "c"]]), cfg)
    err = check_gradients(tiny, [["a", "b"], ["c", "a", "b", "b"]])
    print(f"LSTM gradient check: max relative error {err:.1e}")
    sents = [u.fluent_words() for u in corpus[:3000]]
    model = train_lstm(sents, LstmConfig.desk(hidden=32, embed=32, epochs=epochs),
                       log=lambda m: print("  " + m))
    print(f"  held-out perplexity {perplexity(model, [u.fluent_words() for u in corpus[3000:3300]]):.2f}")


def reranker_demo():
    rng = random.Random(1)
    insts = []
    for k in range(40):
        n = rng.randint(2, 6)
        best = rng.randrange(n)
        feats = [{"signal": float(c == best) + rng.gauss(0, 0.3), "noise": rng.gauss(0, 1)} for c in range(n)]
        corr = [2 if c == best else 0 for c in range(n)]
        pred = [2 if c == best else rng.randint(1, 3) for c in range(n)]
        insts.append(TrainingInstance(feats, corr, pred, 2, f"i{k}"))
    space, means, scales = standardization(insts)
    w = np.array([0.3, -0.2])
    val, grad = objective(w, insts, 1e-3, space, means, scales)
    h = 1e-6
    num = [(objective(w + h * e, insts, 1e-3, space, means, scales)[0]
            - objective(w - h * e, insts, 1e-3, space, means, scales)[0]) / (2 * h) for e in np.eye(2)]
    print(f"reranker: analytic gradient {np.round(grad, 6).tolist()} vs numeric {np.round(num, 6).tolist()}")
    model = train_reranker(insts)
    print(f"  trained weights {({k: round(v, 3) for k, v in model.weights.items()})}")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=20000, help="synthetic utterances for the channel demo")
    ap.add_argument("--epochs", type=int, default=6)
    args = ap.parse_args()
    corpus = channel_demo(args.n)
    ngram_demo(corpus)
    lstm_demo(corpus, args.epochs)
    reranker_demo()


if __name__ == "__main__":
    main()
