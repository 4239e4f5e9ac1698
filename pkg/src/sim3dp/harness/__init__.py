"""Command-line harness: config, training, evaluation, audits and plots."""
