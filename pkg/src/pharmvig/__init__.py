"""Pharmacovigilance text-mining toolkit.

Three tasks over drug reviews and tweets: review sentiment, tweet-level
adverse drug reaction (ADR) presence and BIO tagging of ADR mentions.
"""

__version__ = "0.1.0"
