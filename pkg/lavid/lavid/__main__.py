"""Enable ``python -m lavid`` execution."""

from .cli import main


if __name__ == "__main__":
    main()
