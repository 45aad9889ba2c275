"""Allow running sinc_speaker as a module: python -m sinc_speaker"""

from .cli import main

if __name__ == "__main__":
    main()
