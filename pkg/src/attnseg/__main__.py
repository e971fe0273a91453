from attnseg.cli import main
import sys

sys.exit(main())
