"""Simulator and toolchain for N:M sparse Transformer accelerators."""
