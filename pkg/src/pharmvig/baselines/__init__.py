"""Classical baselines: most common class, n-gram Naive Bayes, logistic regression and a CRF tagger."""
from pharmvig.baselines.crf import (
    TAGS,
    CrfGradient,
    CrfModel,
    ForwardBackward,
    crf_decode,
    crf_features,
    crf_forward_backward,
    crf_log_likelihood_and_gradient,
    crf_sequence_score,
    crf_train,
)
from pharmvig.baselines.logistic import LogisticRegressionModel, lr_gradient, lr_predict, lr_train
from pharmvig.baselines.majority import MostCommonClassifier, most_common_class_fit
from pharmvig.baselines.naive_bayes import NaiveBayesModel, nb_predict, nb_predict_many, nb_train

__all__ = [
    "TAGS",
    "CrfGradient",
    "CrfModel",
    "ForwardBackward",
    "crf_decode",
    "crf_features",
    "crf_forward_backward",
    "crf_log_likelihood_and_gradient",
    "crf_sequence_score",
    "crf_train",
    "LogisticRegressionModel",
    "lr_gradient",
    "lr_predict",
    "lr_train",
    "MostCommonClassifier",
    "most_common_class_fit",
    "NaiveBayesModel",
    "nb_predict",
    "nb_predict_many",
    "nb_train",
]
