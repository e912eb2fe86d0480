"""HTTP surface wrapping the core library: dataset generation, training
jobs with polling, evaluation, and preview rendering."""
