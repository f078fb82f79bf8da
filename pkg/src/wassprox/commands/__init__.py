"""Commands package for Wassprox."""
