"""Entry point for python -m matchdid."""

from matchdid.cli import app

if __name__ == "__main__":
    app()
