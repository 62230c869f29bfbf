"""Tests for the sponge-lab package."""
