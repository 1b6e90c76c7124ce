"""Relation prediction over detected image instances, at desk scale."""

__version__ = "0.1.0"
