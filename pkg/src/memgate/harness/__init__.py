"""Command-line harness: equivalence suites, benchmarks, training and schedule dumps."""
