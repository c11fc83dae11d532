"""Soft fine-tuning lab: a from-scratch autodiff engine, a dual-head CNN,
synthetic domains with controllable bias, and an experiment runner that
compares fine-tuning against soft fine-tuning."""

__version__ = "0.1.0"
