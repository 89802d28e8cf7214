"""Golden workflow tests."""
