from aelink.cli import main
import sys

sys.exit(main())
