"""
Test suite for sparsegen.
"""
