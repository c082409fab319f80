"""
Tests initialization.
"""
