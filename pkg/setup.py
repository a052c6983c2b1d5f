import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

with open("requirements.txt", "r") as fh:
    install_requires = [line.strip() for line in fh if line.strip()]

setuptools.setup(
    name="wakejam",
    version="0.1.0",
    author="Robert Lieck",
    author_email="robert.lieck@epfl.ch",
    description="adversarial music that jams a wake-word detector, with the detector, room simulation and corpus tools",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    package_data={"wakejam": ["default_config.ini", "sources.ini"]},
    install_requires=install_requires,
    entry_points={"console_scripts": ["wakejam=wakejam.cli:run"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8',
)
