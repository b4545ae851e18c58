"""Experiment harness: config, training sessions, checkpoints, verification, timing."""
