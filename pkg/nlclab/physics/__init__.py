"""Spin algebra, Lagrangian, dynamics, histories and outcome statistics."""
