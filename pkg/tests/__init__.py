"""Test suite for zarafem package."""
