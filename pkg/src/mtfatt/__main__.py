"""Main module for the mtfatt package.

This allows running the package directly with python -m mtfatt
"""

from mtfatt import main

if __name__ == "__main__":
    main()
