from setuptools import setup, find_packages

setup(
    name="dpqed-scene-compress",
    version="0.1.0",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "python-dotenv",
        "pydantic>=2",
        "pydantic-settings",
    ],
    entry_points={
        "console_scripts": [
            "dpqed=app.main:main",
        ],
    },
)
