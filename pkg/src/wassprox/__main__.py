"""Entry point for python -m wassprox."""

from wassprox.cli import main

if __name__ == "__main__":
    main()
