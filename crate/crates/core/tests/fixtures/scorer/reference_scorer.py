"""Scores predictions with the rules of the official SQuAD v2.0 evaluation
script and writes per-question and aggregate results.

Usage: python3 reference_scorer.py dev.json predictions.json > expected.json
"""
import collections
import json
import re
import string
import sys


def normalize_answer(s):
    def remove_articles(text):
        return re.sub(re.compile(r"\b(a|an|the)\b", re.UNICODE), " ", text)

    def white_space_fix(text):
        return " ".join(text.split())

    def remove_punc(text):
        exclude = set(string.punctuation)
        return "".join(ch for ch in text if ch not in exclude)

    return white_space_fix(remove_articles(remove_punc(s.lower())))


def get_tokens(s):
    if not s:
        return []
    return normalize_answer(s).split()


def compute_exact(a_gold, a_pred):
    return int(normalize_answer(a_gold) == normalize_answer(a_pred))


def compute_f1(a_gold, a_pred):
    gold_toks = get_tokens(a_gold)
    pred_toks = get_tokens(a_pred)
    common = collections.Counter(gold_toks) & collections.Counter(pred_toks)
    num_same = sum(common.values())
    if len(gold_toks) == 0 or len(pred_toks) == 0:
        return int(gold_toks == pred_toks)
    if num_same == 0:
        return 0
    precision = 1.0 * num_same / len(pred_toks)
    recall = 1.0 * num_same / len(gold_toks)
    return (2 * precision * recall) / (precision + recall)


def main():
    dataset = json.load(open(sys.argv[1]))["data"]
    preds = json.load(open(sys.argv[2]))
    per_question = {}
    has_ans = {}
    for article in dataset:
        for p in article["paragraphs"]:
            for qa in p["qas"]:
                qid = qa["id"]
                has_ans[qid] = bool(qa["answers"])
                gold = [a["text"] for a in qa["answers"] if normalize_answer(a["text"])]
                if not gold:
                    gold = [""]
                pred = preds[qid]
                per_question[qid] = {
                    "exact": max(compute_exact(a, pred) for a in gold),
                    "f1": max(compute_f1(a, pred) for a in gold),
                }

    def agg(ids):
        n = len(ids)
        return {
            "exact": 100.0 * sum(per_question[k]["exact"] for k in ids) / n,
            "f1": 100.0 * sum(per_question[k]["f1"] for k in ids) / n,
            "total": n,
        }

    ids = list(per_question)
    out = {
        "all": agg(ids),
        "has_ans": agg([k for k in ids if has_ans[k]]),
        "no_ans": agg([k for k in ids if not has_ans[k]]),
        "questions": per_question,
    }
    json.dump(out, sys.stdout, indent=1, sort_keys=True)
    sys.stdout.write("\n")


if __name__ == "__main__":
    main()
