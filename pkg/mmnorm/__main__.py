import sys

from mmnorm.main import main

sys.exit(main())
