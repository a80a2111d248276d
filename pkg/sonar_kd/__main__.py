"""Enable running as python -m sonar_kd."""

from sonar_kd.app.main import main

if __name__ == "__main__":
    main()
