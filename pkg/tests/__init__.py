"""
Test package for the FAQ KG matcher.
"""
