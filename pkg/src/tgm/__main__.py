import tgm.cli, sys
sys.exit(tgm.cli.main())
