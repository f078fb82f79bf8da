"""Tests package for Wassprox."""
