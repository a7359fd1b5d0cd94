from densecl.cli import main

main()
