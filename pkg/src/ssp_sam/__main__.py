import sys

from ssp_sam.cli import main

sys.exit(main())
