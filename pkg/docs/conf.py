# -*- coding: utf-8 -*-
#
# forkcast documentation build configuration file.
#
# This file is execfile()d with the current directory set to its containing
# dir. Only the values that differ from the Sphinx defaults are set here.

import sys, os

# Make the package importable for autodoc without installing it.
sys.path.insert(0, os.path.abspath('..'))

# -- General configuration -----------------------------------------------------

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.doctest', 'sphinx.ext.todo',
              'sphinx.ext.coverage', 'sphinx.ext.napoleon']

# torch is heavy and not needed to render signatures.
autodoc_mock_imports = ['torch', 'tqdm']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'forkcast'
copyright = u'2024, forkcast developers'

version = '0.1'
release = '0.1'

exclude_patterns = ['_build']
pygments_style = 'sphinx'

# -- Options for HTML output ---------------------------------------------------

html_theme = 'default'
html_static_path = ['_static']
htmlhelp_basename = 'forkcastdoc'

# -- Options for LaTeX output --------------------------------------------------

latex_elements = {
}

latex_documents = [
  ('index', 'forkcast.tex', u'forkcast Documentation',
   u'forkcast developers', 'manual'),
]

# -- Options for manual page output --------------------------------------------

man_pages = [
    ('index', 'forkcast', u'forkcast Documentation',
     [u'forkcast developers'], 1)
]
