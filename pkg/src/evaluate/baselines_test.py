from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from scipy.special import logsumexp

from pharmvig.baselines import (
    LogisticRegressionModel,
    MostCommonClassifier,
    NaiveBayesModel,
    lr_gradient,
    lr_predict,
    lr_train,
    most_common_class_fit,
    nb_predict,
    nb_predict_many,
    nb_train,
)
from pharmvig.errors import PharmvigError

WORDS = ("rash", "pill", "sleep", "pain", "great", "dose", "itch")
CLASSES = ("a", "b", "c")


def test_most_common_class():
    model = most_common_class_fit(["neutral", "positive", "positive", "negative"])
    assert model.label == "positive"
    assert model.predict_many([None, None]) == ["positive", "positive"]
    assert MostCommonClassifier.from_dict(model.to_dict()) == model


def test_most_common_class_tie_goes_to_smallest_name():
    assert most_common_class_fit(["O", "B", "O", "B"]).label == "B"
    with pytest.raises(ValueError):
        most_common_class_fit([])


def random_corpus(seed: int, n: int = 20) -> list[tuple[Counter, str]]:
    rng = np.random.default_rng(seed)
    docs = []
    for i in range(n):
        words = rng.choice(WORDS, size=int(rng.integers(1, 7)))
        label = CLASSES[i] if i < len(CLASSES) else str(rng.choice(CLASSES))
        docs.append((Counter(str(w) for w in words), label))
    return docs


def brute_force_log_posterior(corpus, doc: Counter, alpha: float) -> dict[str, float]:
    vocab = sorted({w for x, _ in corpus for w in x})
    scores = {}
    for c in CLASSES:
        members = [x for x, label in corpus if label == c]
        counts = Counter()
        for x in members:
            counts.update(x)
        total = sum(counts.values())
        score = np.log(len(members) / len(corpus))
        for w, k in doc.items():
            score += k * np.log((counts[w] + alpha) / (total + alpha * len(vocab)))
        scores[c] = score
    z = logsumexp(list(scores.values()))
    return {c: s - z for c, s in scores.items()}


@pytest.mark.parametrize("seed", range(5))
def test_naive_bayes_matches_hand_arithmetic(seed):
    corpus = random_corpus(seed)
    model = nb_train(corpus, alpha=0.5, classes=CLASSES)
    rng = np.random.default_rng(100 + seed)
    for _ in range(10):
        doc = Counter(str(w) for w in rng.choice(WORDS + ("unseen",), size=4))
        label, log_post = nb_predict(model, doc)
        expected = brute_force_log_posterior(corpus, doc, 0.5)
        for c in CLASSES:
            assert log_post[c] == pytest.approx(expected[c], abs=1e-9)
        assert label == max(expected, key=expected.get)


def test_naive_bayes_batch_probabilities_sum_to_one():
    corpus = random_corpus(9)
    model = nb_train(corpus, classes=CLASSES)
    labels, probs = nb_predict_many(model, [x for x, _ in corpus])
    assert probs.shape == (20, 3)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)
    assert labels == [model.classes[i] for i in probs.argmax(axis=1)]


def test_naive_bayes_unseen_mass():
    model = nb_train([(Counter({"a": 3}), "x"), (Counter({"b": 1}), "y")], alpha=1.0)
    # |V| = 2, total(x) = 3
    assert model.log_likelihood("zzz", "x") == pytest.approx(np.log(1 / 5))
    assert model.log_likelihood("a", "x") == pytest.approx(np.log(4 / 5))
    assert NaiveBayesModel.from_dict(model.to_dict()).log_likelihood("zzz", "y") == pytest.approx(np.log(1 / 3))


@pytest.mark.parametrize("kwargs,match", [
    ({"alpha": 0.0}, "alpha"),
    ({"classes": ("x", "y", "z")}, "no training examples"),
    ({"classes": ("x",)}, "at least two"),
])
def test_naive_bayes_errors(kwargs, match):
    examples = [(Counter({"a": 1}), "x"), (Counter({"b": 1}), "y")]
    with pytest.raises(ValueError, match=match):
        nb_train(examples, **kwargs)


def test_naive_bayes_rejects_undeclared_label():
    examples = [(Counter({"a": 1}), "x"), (Counter({"b": 1}), "y"), (Counter({"c": 1}), "z")]
    with pytest.raises(ValueError, match="not among"):
        nb_train(examples, classes=("x", "y"))
    with pytest.raises(ValueError, match="no n-grams"):
        nb_train([(Counter(), "x"), (Counter(), "y")])


def test_naive_bayes_falls_back_to_the_prior():
    same = Counter({"pill": 2, "pain": 1})
    model = nb_train([(same, "x"), (same, "x"), (same, "y")])
    assert nb_predict(model, same)[0] == "x"
    label, log_post = nb_predict(model, Counter())
    assert label == "x"
    assert log_post["x"] == pytest.approx(np.log(2 / 3))


@pytest.mark.parametrize("seed", range(4))
def test_naive_bayes_argmax_ignores_count_scale_under_uniform_priors(seed):
    rng = np.random.default_rng(seed)
    corpus = [(Counter(str(w) for w in rng.choice(WORDS, size=4)), CLASSES[i % 3]) for i in range(12)]
    model = nb_train(corpus, classes=CLASSES)
    np.testing.assert_allclose(np.exp(model.class_log_priors), 1 / 3)
    for _ in range(10):
        doc = Counter(str(w) for w in rng.choice(WORDS + ("unseen",), size=3))
        label = nb_predict(model, doc)[0]
        for k in (2, 3, 7):
            assert nb_predict(model, Counter({g: k * c for g, c in doc.items()}))[0] == label


def test_model_envelope_checks_kind():
    model = nb_train([(Counter({"a": 1}), "x"), (Counter({"b": 1}), "y")])
    with pytest.raises(PharmvigError):
        MostCommonClassifier.from_dict(model.to_dict())


def separable_fixture(seed: int = 0):
    rng = np.random.default_rng(seed)
    pos = rng.normal(loc=3.0, scale=0.5, size=(20, 2))
    neg = rng.normal(loc=-3.0, scale=0.5, size=(20, 2))
    return np.vstack([pos, neg]), ["adr"] * 20 + ["no_adr"] * 20


def test_logistic_regression_separates():
    X, y = separable_fixture()
    model = lr_train(X, y, lr=0.5, epochs=50, seed=1, batch_size=8)
    preds, probs = lr_predict(model, X)
    assert preds == y
    assert probs.shape == (40, 2)
    assert model.loss_history[-1] < model.loss_history[0]
    assert model.loss_history[0] == pytest.approx(np.log(2))


def test_logistic_regression_is_seeded():
    X, y = separable_fixture()
    a = lr_train(X, y, epochs=5, seed=3)
    b = lr_train(X, y, epochs=5, seed=3)
    np.testing.assert_array_equal(a.weights, b.weights)
    restored = LogisticRegressionModel.from_dict(a.to_dict())
    np.testing.assert_array_equal(lr_predict(restored, X)[1], lr_predict(a, X)[1])


def numpy_objective(W, b, X, y_idx, l2):
    logits = X @ W + b
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return -log_probs[np.arange(len(y_idx)), y_idx].mean() + 0.5 * l2 * np.sum(W ** 2)


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(12, 4))
    classes = ("negative", "neutral", "positive")
    y_idx = rng.integers(0, 3, size=12)
    model = LogisticRegressionModel(rng.normal(size=(4, 3)), rng.normal(size=3), l2=0.1, classes=classes)
    grad = lr_gradient(model, X, [classes[i] for i in y_idx])

    params = np.concatenate([model.weights.ravel(), model.bias])
    eps = 1e-6
    numeric = np.zeros_like(params)
    for k in range(len(params)):
        up, down = params.copy(), params.copy()
        up[k] += eps
        down[k] -= eps
        f_up = numpy_objective(up[:12].reshape(4, 3), up[12:], X, y_idx, 0.1)
        f_down = numpy_objective(down[:12].reshape(4, 3), down[12:], X, y_idx, 0.1)
        numeric[k] = (f_up - f_down) / (2 * eps)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-8)


def test_logistic_regression_errors():
    X, y = separable_fixture()
    with pytest.raises(ValueError, match="two classes"):
        lr_train(X, ["adr"] * 40)
    with pytest.raises(ValueError, match="rows"):
        lr_train(X[:10], y)
    with pytest.raises(ValueError, match="not among"):
        lr_train(X, y, classes=("adr", "other"))
    with pytest.raises(ValueError, match="epochs"):
        lr_train(X, y, epochs=0)


def test_logistic_weights_shrink_as_l2_grows():
    X, y = separable_fixture()
    norms = [np.linalg.norm(lr_train(X, y, l2=l2, lr=0.1, epochs=60, seed=2).weights) for l2 in (0.01, 0.1, 1.0, 5.0)]
    assert all(a >= b for a, b in zip(norms, norms[1:]))


def test_logistic_gradient_vanishes_at_the_optimum():
    rng = np.random.default_rng(11)
    X = rng.normal(size=(10, 2))
    y = [str(rng.choice(["adr", "no_adr"])) for _ in range(10)]
    y[:2] = ["adr", "no_adr"]
    model = lr_train(X, y, l2=0.1, lr=0.5, epochs=2000, seed=0, batch_size=10)
    assert np.linalg.norm(lr_gradient(model, X, y)) < 1e-3
