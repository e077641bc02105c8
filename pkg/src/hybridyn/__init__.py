"""Hybrid physics/data manipulator dynamics with virtual force sensing,
contact tasks and speed planning."""

__version__ = "0.1.0"
