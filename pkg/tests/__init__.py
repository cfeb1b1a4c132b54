"""Tests for diffprobe package."""
