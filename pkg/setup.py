import setuptools

# Function to read the contents of the README file
def read_readme():
    with open("README.md", "r", encoding="utf-8") as fh:
        long_description = fh.read()
    return long_description

# Function to read requirements from requirements.txt
def read_requirements():
    with open("requirements.txt", "r", encoding="utf-8") as req_file:
        return [line.strip() for line in req_file if line.strip() and not line.startswith("#")]

# Package metadata
NAME = "qmr-motion"
VERSION = "0.1.0" # Keep in sync with qmr_motion.__version__
DESCRIPTION = "Groupwise motion correction for quantitative MRI sequences (rPCA + B-spline FFD) with T1 fitting."
LONG_DESCRIPTION = read_readme()
AUTHOR = "The Mule" # Placeholder
AUTHOR_EMAIL = "author@example.com" # Placeholder
REQUIRES_PYTHON = ">=3.9"

# Both packages (qmr_motion, qmr_experiment) live in 'src/'
PACKAGE_DIR = {'': 'src'}
PACKAGES = setuptools.find_packages(where='src')

# Get dependencies
INSTALL_REQUIRES = read_requirements()

setuptools.setup(
    name=NAME,
    version=VERSION,
    author=AUTHOR,
    author_email=AUTHOR_EMAIL,
    description=DESCRIPTION,
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    package_dir=PACKAGE_DIR,
    packages=PACKAGES,
    python_requires=REQUIRES_PYTHON,
    install_requires=INSTALL_REQUIRES,
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering :: Medical Science Apps.",
        "Topic :: Scientific/Engineering :: Image Processing",
    ],
    entry_points={
        "console_scripts": [
            "qmr-motion=qmr_motion.cli:main",
        ]
    },
)
