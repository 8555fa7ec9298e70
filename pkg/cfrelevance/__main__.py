from .cfrelevance import main

main()
