from dotenv import load_dotenv
load_dotenv()
import sys
from typing import Optional, Sequence

from .cli.interface import CommandLineInterface


def main(argv: Optional[Sequence[str]] = None) -> int:
    return CommandLineInterface().run(argv)


def run():
    sys.exit(main())


if __name__ == "__main__":
    run()
