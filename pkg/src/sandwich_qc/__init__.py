"""Answer-first query correction toolkit: data, output grammars, rewards,
rejection sampling, token-budget evaluation and a tabular policy lab."""

__version__ = "0.1.0"
