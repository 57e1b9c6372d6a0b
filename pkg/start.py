import os
import sys
import time
import logging
import logging.config
import faulthandler


def _missing_dependency_message(module_name: str) -> str:
	requirements_path = os.path.join(os.path.dirname(os.path.abspath(__file__)), "requirements.txt")
	return (
		f"Fehlende Python-Abhaengigkeit: '{module_name}'.\n\n"
		"Installiere die Projekt-Abhaengigkeiten in deiner aktiven virtuellen Umgebung, z. B.:\n"
		f"  python -m pip install -r {requirements_path}\n"
	)


def build_logging_config(log_level: str, log_file: str | None = None) -> dict:
	handlers: dict = {
		"console": {
			"class": "logging.StreamHandler",
			"stream": "ext://sys.stderr",
			"formatter": "default",
		},
	}
	if log_file:
		handlers["file"] = {
			"class": "logging.FileHandler",
			"filename": log_file,
			"mode": "a",
			"encoding": "utf-8",
			"formatter": "default",
		}
	return {
		"version": 1,
		"disable_existing_loggers": False,
		"formatters": {
			"default": {
				"format": "%(asctime)s %(levelname)-8s %(name)s: %(message)s",
				"datefmt": "%Y-%m-%d %H:%M:%S",
			},
		},
		"handlers": handlers,
		"loggers": {
			"detektor": {"handlers": list(handlers), "level": log_level, "propagate": False},
		},
	}


def write_startup_stamp(log_file: str) -> None:
	try:
		stamp = time.strftime("%Y-%m-%d %H:%M:%S")
		with open(log_file, "a", encoding="utf-8") as handle:
			handle.write(f"[startup] {stamp} pid={os.getpid()} exe={sys.executable} cwd={os.getcwd()} argv={sys.argv[1:]}\n")
	except Exception:
		pass


def try_build_logging_config(log_level: str, log_file: str | None) -> dict:
	if not log_file:
		return build_logging_config(log_level)
	try:
		# Test ob Log-Datei angelegt/beschreibbar ist
		os.makedirs(os.path.dirname(os.path.abspath(log_file)), exist_ok=True)
		with open(log_file, "a", encoding="utf-8"):
			pass
		return build_logging_config(log_level, log_file)
	except OSError as exc:
		print(f"[WARN] Log-Datei {log_file} nicht beschreibbar ({exc}). Nur Konsolen-Logging.", file=sys.stderr)
		return build_logging_config(log_level)


if __name__ == "__main__":
	try:
		from detektor.cli import main
		from detektor.config import parse_log_level
	except ModuleNotFoundError as exc:
		raise SystemExit(_missing_dependency_message(exc.name or "unbekannt")) from exc

	log_file = os.environ.get("DETEKTOR_LOG_FILE", "").strip() or None
	logging.config.dictConfig(try_build_logging_config(parse_log_level(), log_file))
	if log_file:
		write_startup_stamp(log_file)
	# Native Crash-Backtraces (z.B. aus torch) in die Logdatei bzw. auf stderr
	try:
		faulthandler.enable(file=open(log_file, "a", encoding="utf-8") if log_file else sys.stderr)
	except Exception:
		pass

	sys.exit(main())
