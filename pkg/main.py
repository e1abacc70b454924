import sys
from sedsr.cli import cli_main
from sedsr.utils.logger import setup_logger

def main():
    setup_logger()
    return cli_main(sys.argv[1:])

if __name__ == "__main__":
    sys.exit(main())
