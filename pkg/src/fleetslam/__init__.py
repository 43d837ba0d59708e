"""Centralized collaborative visual-inertial SLAM back-end with synthetic agents."""

__version__ = "0.1.0"
